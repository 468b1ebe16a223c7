//! Batch regression losses. Predictions and targets are `[batch, dims]`;
//! the per-sample loss is summed over dims and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionLoss {
    /// Sum of absolute coordinate errors (Laplacian likelihood).
    #[default]
    L1,
    /// Sum of squared coordinate errors (isotropic Gaussian likelihood).
    L2,
}

impl RegressionLoss {
    pub fn eval(self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            RegressionLoss::L1 => l1_loss(pred, target),
            RegressionLoss::L2 => l2_loss(pred, target),
        }
    }
}

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "loss inputs {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean over the batch of `Σ|pred - target|`, with its gradient w.r.t. `pred`.
/// The subgradient at zero error is taken as zero.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check(pred, target)?;
    let inv_b = 1.0 / pred.rows() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.abs();
        *g = if d > 0.0 {
            inv_b
        } else if d < 0.0 {
            -inv_b
        } else {
            0.0
        };
    }
    Ok((total * inv_b, grad))
}

/// Mean over the batch of `Σ(pred - target)²`.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check(pred, target)?;
    let inv_b = 1.0 / pred.rows() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d * d;
        *g = 2.0 * d * inv_b;
    }
    Ok((total * inv_b, grad))
}
