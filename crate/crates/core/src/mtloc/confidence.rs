//! Uncertainty probing, thresholding and k-NN correction of pseudo labels.

use crate::error::{Error, Result};
use crate::localizer::Predictor;
use crate::nn::{stream, Rng, Tensor};

/// Lower bound on neighbour distances in the inverse-distance weights.
pub const MIN_NEIGHBOR_DISTANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Teacher prediction on the clean input.
    pub label: [f64; 2],
    /// Population std of the teacher's `(x, y)` predictions over noisy probes.
    pub sigma: [f64; 2],
    pub confident: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    /// Labels with zero uncertainty, all marked confident.
    pub fn from_labels(labels: &Tensor) -> Self {
        Self {
            entries: labels
                .data()
                .chunks_exact(2)
                .map(|l| PseudoLabel {
                    label: [l[0], l[1]],
                    sigma: [0.0, 0.0],
                    confident: true,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_uncertain(&self) -> usize {
        self.entries.iter().filter(|e| !e.confident).count()
    }

    pub fn label_tensor(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.entries[i].label).collect();
        Tensor::from_vec(&[indices.len(), 2], data).expect("non-empty batch")
    }
}

/// Per-coordinate uncertainty cut-offs `T = mean + c * std` of the sigmas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub t_x: f64,
    pub t_y: f64,
}

/// Settings shared by the probe pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub noise_variance: f64,
    pub n_probe: usize,
    pub seed: u64,
}

/// Mean and population std. Deviations are taken from the first value so
/// that a constant sequence has exactly zero spread.
fn population_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let first = values.clone().next().unwrap_or(0.0);
    let shift = values.clone().map(|v| v - first).sum::<f64>() / n;
    let var = values.map(|v| (v - first - shift) * (v - first - shift)).sum::<f64>() / n;
    (first + shift, var.sqrt())
}

/// Teacher labels on clean inputs plus per-sample spread over `n_probe`
/// noisy copies. `inputs` are normalized `[n, 8]`; every sample draws its
/// noise from its own stream keyed by `(round, sample)`.
pub fn probe_uncertainty<P: Predictor + ?Sized>(
    teacher: &P,
    inputs: &Tensor,
    settings: &ProbeSettings,
    round: u64,
) -> Result<PseudoLabelSet> {
    if settings.n_probe < 2 {
        return Err(Error::Config(format!(
            "need at least 2 probes to estimate a spread, got {}",
            settings.n_probe
        )));
    }
    if !(settings.noise_variance >= 0.0) {
        return Err(Error::Config("noise variance must be non-negative".into()));
    }
    let clean = teacher.predict_normalized(inputs)?;
    let (n, width) = (inputs.rows(), inputs.row_len());
    let std = settings.noise_variance.sqrt();
    let mut noisy = Vec::with_capacity(n * settings.n_probe * width);
    for i in 0..n {
        let mut rng = Rng::keyed(settings.seed, &[stream::PROBE, round, i as u64]);
        for _ in 0..settings.n_probe {
            for &v in inputs.row(i) {
                noisy.push(v + rng.normal(std));
            }
        }
    }
    let noisy = Tensor::from_vec(&[n * settings.n_probe, width], noisy)?;
    let probes = teacher.predict_normalized(&noisy)?;
    let entries = (0..n)
        .map(|i| {
            let rows = &probes.data()[i * settings.n_probe * 2..(i + 1) * settings.n_probe * 2];
            let (_, sx) = population_std(rows.iter().step_by(2).copied());
            let (_, sy) = population_std(rows.iter().skip(1).step_by(2).copied());
            PseudoLabel {
                label: [clean.data()[2 * i], clean.data()[2 * i + 1]],
                sigma: [sx, sy],
                confident: true,
            }
        })
        .collect();
    Ok(PseudoLabelSet { entries })
}

/// Computes the thresholds and marks a sample uncertain iff either sigma
/// strictly exceeds its threshold.
pub fn compute_thresholds(pls: &mut PseudoLabelSet, c_x: f64, c_y: f64) -> Result<Thresholds> {
    if pls.is_empty() {
        return Err(Error::Data("no pseudo labels to threshold".into()));
    }
    let (mx, sx) = population_std(pls.entries.iter().map(|e| e.sigma[0]));
    let (my, sy) = population_std(pls.entries.iter().map(|e| e.sigma[1]));
    let t = Thresholds {
        t_x: mx + c_x * sx,
        t_y: my + c_y * sy,
    };
    for e in &mut pls.entries {
        e.confident = !(e.sigma[0] > t.t_x || e.sigma[1] > t.t_y);
    }
    Ok(t)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Replaces every uncertain label by the inverse-distance weighted mean of
/// its `k` nearest confident samples in input space. Neighbours are taken
/// nearest first, ties going to the lower index; when fewer than `k`
/// confident samples exist all of them are used. Confident labels are left
/// alone, and with no confident sample at all the set is returned unchanged.
pub fn correct_labels(pls: &PseudoLabelSet, inputs: &Tensor, k: usize) -> Result<PseudoLabelSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if inputs.rows() != pls.len() {
        return Err(Error::Shape(format!(
            "{} inputs for {} pseudo labels",
            inputs.rows(),
            pls.len()
        )));
    }
    let confident: Vec<usize> = (0..pls.len()).filter(|&i| pls.entries[i].confident).collect();
    let mut out = pls.clone();
    if confident.is_empty() {
        log::warn!("no confident pseudo labels; skipping correction");
        return Ok(out);
    }
    let k = k.min(confident.len());
    let mut neighbors: Vec<(f64, usize)> = Vec::with_capacity(confident.len());
    for (i, entry) in out.entries.iter_mut().enumerate() {
        if entry.confident {
            continue;
        }
        neighbors.clear();
        neighbors.extend(confident.iter().map(|&j| (euclidean(inputs.row(i), inputs.row(j)), j)));
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < neighbors.len() {
            neighbors.select_nth_unstable_by(k - 1, by_distance);
        }
        let nearest = &mut neighbors[..k];
        nearest.sort_unstable_by(by_distance);
        let (mut wx, mut wy, mut wsum) = (0.0, 0.0, 0.0);
        for &(d, j) in nearest.iter() {
            let w = 1.0 / d.max(MIN_NEIGHBOR_DISTANCE);
            let l = pls.entries[j].label;
            wx += w * l[0];
            wy += w * l[1];
            wsum += w;
        }
        entry.label = [wx / wsum, wy / wsum];
    }
    Ok(out)
}
