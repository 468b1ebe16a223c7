use super::{Dataset, Sample, N_FEATURES};
use crate::error::{Error, Result};

/// Lower bound applied to a feature's standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    pub fn normalize(&self, features: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|i| (features[i] - self.mean[i]) / self.std[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("normalization std must be finite and positive".into()));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of each feature.
pub fn fit_normalizer(data: &Dataset) -> Result<NormStats> {
    if !data.is_labeled() {
        return Err(Error::Usage(
            "normalizer must be fitted on labeled source training data".into(),
        ));
    }
    let n = data.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    for s in data.samples() {
        for (m, v) in mean.iter_mut().zip(&s.features) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; N_FEATURES];
    for s in data.samples() {
        for i in 0..N_FEATURES {
            let d = s.features[i] - mean[i];
            var[i] += d * d;
        }
    }
    let std = std::array::from_fn(|i| {
        let s = (var[i] / n).sqrt();
        if s < STD_FLOOR {
            log::warn!("feature {i} is constant; flooring its std at {STD_FLOOR}");
            STD_FLOOR
        } else {
            s
        }
    });
    Ok(NormStats { mean, std })
}

pub fn apply_normalizer(data: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let samples = data
        .samples()
        .iter()
        .map(|s| Sample::new(stats.normalize(&s.features), s.label))
        .collect();
    Dataset::new(data.name(), samples)
}
