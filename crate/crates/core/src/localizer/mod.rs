//! The source localizer: a 1-D convolutional feature extractor followed by a
//! dense regressor, plus the normalization and source statistics that travel
//! with a trained model.

mod artifact;
mod stats;
mod train;

pub use artifact::{load, save, ARTIFACT_MAGIC, ARTIFACT_VERSION};
pub use stats::{compute_source_stats, mean_and_covariance, SourceStats};
pub use train::{finetune_oracle, train_source, EpochRecord, TrainConfig, TrainHistory};

use std::collections::BTreeMap;

use crate::data::{Dataset, NormStats, N_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{stream, Adam, AdamConfig, Mode, ParamSet, Rng, Sequential, Tape, Tensor};

/// Width of the flattened extractor output: 6 positions x 128 filters.
pub const FEATURE_DIM: usize = 768;
pub const DROPOUT_RATE: f64 = 0.2;
const PREDICT_CHUNK: usize = 512;

pub(crate) fn extractor_builder() -> crate::nn::SequentialBuilder {
    Sequential::builder()
        .conv1d("conv1", 1, 64, 2)
        .relu()
        .dropout(DROPOUT_RATE)
        .conv1d("conv2", 64, 128, 2)
        .relu()
        .dropout(DROPOUT_RATE)
        .flatten()
}

pub(crate) fn regressor_builder() -> crate::nn::SequentialBuilder {
    Sequential::builder()
        .dense("dense1", FEATURE_DIM, 128)
        .relu()
        .dropout(DROPOUT_RATE)
        .dense("dense2", 128, 64)
        .relu()
        .dense("out", 64, 2)
}

/// Predicted position in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
}

impl Prediction {
    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Forward records for one training pass through both halves.
pub struct LocalizerTape {
    pub extractor: Tape,
    pub regressor: Tape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    extractor: Sequential,
    regressor: Sequential,
    pub norm: NormStats,
    pub source_stats: Option<SourceStats>,
    /// Free-form provenance (training kind, seed, hyperparameters).
    pub meta: BTreeMap<String, String>,
}

impl Localizer {
    /// Freshly initialized network.
    pub fn init(seed: u64, norm: NormStats) -> Result<Self> {
        norm.validate()?;
        let extractor = extractor_builder().build(&mut Rng::keyed(seed, &[stream::INIT, 0]))?;
        let regressor = regressor_builder().build(&mut Rng::keyed(seed, &[stream::INIT, 1]))?;
        Ok(Self {
            extractor,
            regressor,
            norm,
            source_stats: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn from_params(extractor: ParamSet, regressor: ParamSet, norm: NormStats) -> Result<Self> {
        norm.validate()?;
        Ok(Self {
            extractor: extractor_builder().build_with(extractor)?,
            regressor: regressor_builder().build_with(regressor)?,
            norm,
            source_stats: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn extractor(&self) -> &Sequential {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut Sequential {
        &mut self.extractor
    }

    pub fn regressor(&self) -> &Sequential {
        &self.regressor
    }

    pub fn regressor_mut(&mut self) -> &mut Sequential {
        &mut self.regressor
    }

    pub fn num_params(&self) -> usize {
        self.extractor.params().num_values() + self.regressor.params().num_values()
    }

    pub fn zero_grad(&mut self) {
        self.extractor.params_mut().zero_grad();
        self.regressor.params_mut().zero_grad();
    }

    /// Normalized `[batch, 8]` input to the `[batch, 8, 1]` conv layout.
    fn as_sequence(x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != N_FEATURES {
            return Err(Error::Shape(format!(
                "localizer expects [batch, {N_FEATURES}] input, got {:?}",
                x.shape()
            )));
        }
        x.clone().reshape(&[x.rows(), N_FEATURES, 1])
    }

    /// `[batch, 768]` features for normalized input.
    pub fn features(&self, x: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Tape)> {
        self.extractor.forward(&Self::as_sequence(x)?, mode)
    }

    /// Training forward pass on normalized input, returning `[batch, 2]`.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<(Tensor, LocalizerTape)> {
        match mode {
            Mode::Eval => {
                let (f, extractor) = self.features(x, Mode::Eval)?;
                let (y, regressor) = self.regressor.forward(&f, Mode::Eval)?;
                Ok((y, LocalizerTape { extractor, regressor }))
            }
            Mode::Train(rng) => {
                let (f, extractor) = self.features(x, Mode::Train(rng))?;
                let (y, regressor) = self.regressor.forward(&f, Mode::Train(rng))?;
                Ok((y, LocalizerTape { extractor, regressor }))
            }
        }
    }

    /// Accumulates gradients of both halves; returns the input gradient.
    pub fn backward(&mut self, tape: &LocalizerTape, grad_out: Tensor) -> Result<Tensor> {
        let g = self.regressor.backward(&tape.regressor, grad_out)?;
        self.extractor.backward(&tape.extractor, g)
    }

    /// Deterministic predictions for normalized `[batch, 8]` input.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(x.rows() * 2);
        let n = x.rows();
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::from_vec(&[end - start, x.row_len()], x.data()[start * x.row_len()..end * x.row_len()].to_vec())?;
            let f = self.extractor.infer(&Self::as_sequence(&chunk)?)?;
            let y = self.regressor.infer(&f)?;
            out.extend_from_slice(y.data());
            start = end;
        }
        Tensor::from_vec(&[n, 2], out)
    }

    /// Normalized features of every sample in `data`, using the stored stats.
    pub fn normalized_inputs(&self, data: &Dataset) -> Tensor {
        let rows: Vec<[f64; N_FEATURES]> = data.samples().iter().map(|s| self.norm.normalize(&s.features)).collect();
        Tensor::from_rows(&rows).expect("datasets are non-empty")
    }

    /// Predictions in dataset order, dropout disabled.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        let y = self.infer(&self.normalized_inputs(data))?;
        if !y.all_finite() {
            return Err(Error::Numerical("non-finite prediction".into()));
        }
        Ok(y.data().chunks_exact(2).map(|p| Prediction { x: p[0], y: p[1] }).collect())
    }

    /// Copies every parameter value from `other` (same architecture).
    pub fn copy_weights_from(&mut self, other: &Localizer) {
        self.extractor = other.extractor.clone();
        self.regressor = other.regressor.clone();
    }
}

/// Anything mapping normalized `[n, 8]` inputs to `[n, 2]` positions.
pub trait Predictor {
    fn predict_normalized(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Localizer {
    fn predict_normalized(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }
}

/// One Adam state per half of the localizer.
#[derive(Clone, Debug)]
pub struct LocalizerAdam {
    pub extractor: Adam,
    pub regressor: Adam,
}

impl LocalizerAdam {
    pub fn new(model: &Localizer, config: AdamConfig) -> Self {
        Self {
            extractor: Adam::new(model.extractor.params(), config),
            regressor: Adam::new(model.regressor.params(), config),
        }
    }

    pub fn step(&mut self, model: &mut Localizer) -> Result<()> {
        self.extractor.step(model.extractor.params_mut())?;
        self.regressor.step(model.regressor.params_mut())
    }
}
