//! Independent reference implementations shared by the integration tests
//! and the acceptance run.

use mtloc::localizer::{compute_source_stats, Localizer};
use mtloc::mtloc::{compute_thresholds, BatchSnapshot, MTLocConfig, MeanTeacher, PseudoLabel, PseudoLabelSet};
use mtloc::nn::{Rng, Tensor};
use mtloc::shot::{Shot, ShotConfig, ShotLosses};

use super::{model_for, small_source, small_target};

pub fn random_inputs(n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_vec(&[n, 8], (0..n * 8).map(|_| rng.standard_normal()).collect()).unwrap()
}

/// Direct evaluation of the correction rule from a full distance matrix.
pub fn brute_force_correct(pls: &PseudoLabelSet, x: &Tensor, k: usize) -> Vec<[f64; 2]> {
    let n = pls.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for f in 0..8 {
                let d = x.row(i)[f] - x.row(j)[f];
                s += d * d;
            }
            dist[i][j] = s.sqrt();
        }
    }
    (0..n)
        .map(|i| {
            let e = &pls.entries[i];
            if e.confident {
                return e.label;
            }
            let mut cands: Vec<usize> = (0..n).filter(|&j| pls.entries[j].confident).collect();
            if cands.is_empty() {
                return e.label;
            }
            // stable sort keeps lower indices first among equal distances
            cands.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap());
            let used = &cands[..k.min(cands.len())];
            let mut num = [0.0, 0.0];
            let mut den = 0.0;
            for &j in used {
                let w = 1.0 / dist[i][j].max(1e-8);
                num[0] += w * pls.entries[j].label[0];
                num[1] += w * pls.entries[j].label[1];
                den += w;
            }
            [num[0] / den, num[1] / den]
        })
        .collect()
}

pub fn random_set(n: usize, seed: u64) -> (PseudoLabelSet, Tensor) {
    let x = random_inputs(n, seed);
    let mut rng = Rng::keyed(seed, &[99]);
    let entries = (0..n)
        .map(|_| PseudoLabel {
            label: [10.0 * rng.uniform(), 10.0 * rng.uniform()],
            sigma: [rng.uniform(), rng.uniform().powi(3)],
            confident: true,
        })
        .collect();
    let mut pls = PseudoLabelSet { entries };
    compute_thresholds(&mut pls, 0.5, 0.5).unwrap();
    (pls, x)
}

/// Distance in units in the last place between two finite doubles.
pub fn ulps(a: f64, b: f64) -> u64 {
    let ord = |v: f64| {
        let bits = v.to_bits() as i64;
        if bits < 0 { i64::MIN - bits } else { bits }
    };
    ord(a).abs_diff(ord(b))
}

/// Two epochs of five batches each; every batch compares the teacher with
/// `alpha * student + (1 - alpha) * previous teacher`. Returns the number of
/// batches checked and the largest deviation in ulps.
pub fn ema_exactness(alpha: f64) -> (usize, u64) {
    let src = small_source(60);
    let source = model_for(&src, 4);
    let target = small_target(100);
    let cfg = MTLocConfig { alpha, batch_size: 20, epochs: 2, ..MTLocConfig::plain() };
    let mut mt = MeanTeacher::new(&source, &target, &cfg).unwrap();
    let (mut checked, mut worst) = (0, 0);
    let mut obs = |s: &BatchSnapshot<'_>| {
        for (t, st, prev) in [
            (s.teacher.extractor(), s.student.extractor(), s.teacher_before.extractor()),
            (s.teacher.regressor(), s.student.regressor(), s.teacher_before.regressor()),
        ] {
            let (t, st, prev) = (t.params().flat_values(), st.params().flat_values(), prev.params().flat_values());
            for i in 0..t.len() {
                worst = worst.max(ulps(t[i], alpha * st[i] + (1.0 - alpha) * prev[i]));
            }
        }
        checked += 1;
    };
    mt.run_epoch_observed(Some(&mut obs)).unwrap();
    mt.run_epoch_observed(Some(&mut obs)).unwrap();
    (checked, worst)
}

/// Untrained localizer carrying statistics computed on `n` source samples.
pub fn shot_ready_model(n: usize, seed: u64) -> Localizer {
    let src = small_source(n);
    let mut m = model_for(&src, seed);
    m.source_stats = Some(compute_source_stats(&m, &src).unwrap());
    m
}

/// Loss terms on a zeroed-extractor model whose stored statistics come from
/// that same model: every view, mask and teacher agree.
pub fn matched_statistics_losses() -> ShotLosses {
    let src = small_source(20);
    let mut m = model_for(&src, 3);
    for p in m.extractor_mut().params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    m.source_stats = Some(compute_source_stats(&m, &src).unwrap());
    let cfg = ShotConfig { epochs: 1, batch_size: 16, ..Default::default() };
    let mut shot = Shot::new(&m, &cfg).unwrap();
    shot.accumulate_gradients(&m.normalized_inputs(&src), &[0, 0]).unwrap()
}
