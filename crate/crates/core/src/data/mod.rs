//! Datasets of received-power readings, CSV I/O, normalization, splitting
//! and a synthetic path-loss generator.

mod csv_io;
mod norm;
mod split;
mod synth;

pub use csv_io::{load_csv, write_csv, ColumnMapping};
pub use norm::{apply_normalizer, fit_normalizer, NormStats, STD_FLOOR};
pub use split::{make_folds, split_train_test, FoldAssignment};
pub use synth::{generate_synthetic, SynthConfig};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Four receivers times two polarizations.
pub const N_FEATURES: usize = 8;

/// Canonical feature column names, ordered `[R1 x-pol, R1 y-pol, R2 x-pol, ...]`.
pub const FEATURE_COLUMNS: [&str; N_FEATURES] = ["r1x", "r1y", "r2x", "r2y", "r3x", "r3y", "r4x", "r4y"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    /// Received power in dBm (or normalized units once normalized).
    pub features: [f64; N_FEATURES],
    /// Ground-truth `(x, y)` in meters.
    pub label: Option<[f64; 2]>,
}

impl Sample {
    pub fn new(features: [f64; N_FEATURES], label: Option<[f64; 2]>) -> Self {
        Self { features, label }
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|v| v.is_finite())
            && self.label.is_none_or(|l| l.iter().all(|v| v.is_finite()))
    }
}

/// A non-empty, uniformly labeled or uniformly unlabeled set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    samples: Vec<Sample>,
    labeled: bool,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::Data(format!("dataset `{name}` is empty")));
        }
        let n_labeled = samples.iter().filter(|s| s.label.is_some()).count();
        if n_labeled != 0 && n_labeled != samples.len() {
            return Err(Error::Data(format!(
                "dataset `{name}` mixes labeled and unlabeled samples"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "dataset `{name}` has a non-finite value in sample {i}"
            )));
        }
        Ok(Self {
            name,
            labeled: n_labeled != 0,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same features with labels dropped.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample::new(s.features, None))
                .collect(),
            labeled: false,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.name.clone(), samples)
    }

    pub fn labels(&self) -> Result<Vec<[f64; 2]>> {
        if !self.labeled {
            return Err(Error::Usage(format!("dataset `{}` is unlabeled", self.name)));
        }
        Ok(self.samples.iter().map(|s| s.label.unwrap()).collect())
    }

    pub fn features(&self) -> Vec<[f64; N_FEATURES]> {
        self.samples.iter().map(|s| s.features).collect()
    }

    /// `[n, 8]` feature matrix for the given sample indices.
    pub fn feature_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * N_FEATURES);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::from_vec(&[indices.len(), N_FEATURES], data).expect("non-empty index list")
    }
}
