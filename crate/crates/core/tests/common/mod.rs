#![allow(dead_code)]

use mtloc::data::{fit_normalizer, generate_synthetic, Dataset, Sample, SynthConfig};
use mtloc::localizer::Localizer;
use mtloc::nn::Rng;

/// A few dozen labeled samples from the source room.
pub fn small_source(n: usize) -> Dataset {
    let full = generate_synthetic(&SynthConfig::source_layout()).unwrap();
    let step = full.len() / n;
    let idx: Vec<usize> = (0..n).map(|i| i * step).collect();
    full.subset(&idx).unwrap()
}

pub fn small_target(n: usize) -> Dataset {
    let full = generate_synthetic(&SynthConfig::target_layout()).unwrap();
    let step = full.len() / n;
    let idx: Vec<usize> = (0..n).map(|i| i * step).collect();
    full.subset(&idx).unwrap().unlabeled()
}

/// Untrained localizer normalized on `data`.
pub fn model_for(data: &Dataset, seed: u64) -> Localizer {
    Localizer::init(seed, fit_normalizer(data).unwrap()).unwrap()
}

pub fn random_unlabeled(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let samples = (0..n)
        .map(|_| Sample::new(std::array::from_fn(|_| -60.0 + 10.0 * rng.standard_normal()), None))
        .collect();
    Dataset::new("random", samples).unwrap()
}

pub fn mae_d(model: &Localizer, data: &Dataset) -> f64 {
    let pred = model.predict(data).unwrap();
    let labels = data.labels().unwrap();
    pred.iter()
        .zip(&labels)
        .map(|(p, l)| (p.x - l[0]).hypot(p.y - l[1]))
        .sum::<f64>()
        / labels.len() as f64
}

pub mod grad_trials;
pub mod gradcheck;
pub mod oracles;
