//! Small deterministic numerical kernel: tensors, layers with explicit
//! backward passes, losses, Adam and a seeded RNG.

mod adam;
mod gemm;
mod layers;
mod loss;
mod param;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{conv1d_forward, dropout, Layer, Mode, Sequential, SequentialBuilder, Tape, SIGMOID_CLAMP};
pub use loss::{l1_loss, l2_loss, RegressionLoss};
pub use param::{Param, ParamSet};
pub use rng::{stream, stream_id, Rng};
pub use tensor::Tensor;

pub(crate) use gemm::gemm;
