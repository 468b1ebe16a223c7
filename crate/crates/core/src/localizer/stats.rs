use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{gemm, Tensor};

use super::{Localizer, FEATURE_DIM};

/// Statistics of the trained source model over its own training data,
/// stored with the model so adaptation never needs the source samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceStats {
    /// Mean prediction per coordinate.
    pub pred_mean: [f64; 2],
    /// Unbiased prediction variance per coordinate.
    pub pred_var: [f64; 2],
    pub feat_dim: usize,
    /// Unbiased covariance of extractor features, row-major `feat_dim²`.
    pub feat_cov: Vec<f64>,
}

impl SourceStats {
    pub fn validate(&self) -> Result<()> {
        if self.feat_cov.len() != self.feat_dim * self.feat_dim {
            return Err(Error::Shape("feature covariance size mismatch".into()));
        }
        if self.pred_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Data("negative prediction variance".into()));
        }
        let d = self.feat_dim;
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.feat_cov[i * d + j], self.feat_cov[j * d + i]);
                if (a - b).abs() > 1e-8 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Data("feature covariance is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

/// Column means and unbiased covariance of a `[n, d]` matrix. With fewer than
/// two rows the covariance is all zeros.
pub fn mean_and_covariance(rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (rows.rows(), rows.row_len());
    let mut mean = vec![0.0; d];
    for r in rows.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    if n < 2 {
        return (mean, cov);
    }
    let mut centered = rows.data().to_vec();
    for r in centered.chunks_exact_mut(d) {
        for (v, m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    gemm(d, n, d, &centered, true, &centered, false, &mut cov, false);
    let scale = 1.0 / (n - 1) as f64;
    cov.iter_mut().for_each(|c| *c *= scale);
    // exact symmetry regardless of summation order inside gemm
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    (mean, cov)
}

/// Inference-mode statistics of `model` over `data` (raw, unnormalized).
pub fn compute_source_stats(model: &Localizer, data: &Dataset) -> Result<SourceStats> {
    let x = model.normalized_inputs(data);
    let (features, _) = model.features(&x, crate::nn::Mode::Eval)?;
    let preds = model.regressor().infer(&features)?;
    let (pred_mean, pred_cov) = mean_and_covariance(&preds);
    let (_, feat_cov) = mean_and_covariance(&features);
    if !feat_cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite source feature covariance".into()));
    }
    Ok(SourceStats {
        pred_mean: [pred_mean[0], pred_mean[1]],
        pred_var: [pred_cov[0], pred_cov[3]],
        feat_dim: FEATURE_DIM,
        feat_cov,
    })
}
