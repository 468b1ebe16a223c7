//! Seeded finite-difference trials for every trainable path.

use mtloc::dann::{Dann, DannBatch, DannConfig, ExtractorObjective};
use mtloc::data::NormStats;
use mtloc::localizer::{Localizer, SourceStats, FEATURE_DIM};
use mtloc::nn::{Mode, Rng, Tensor};
use mtloc::shot::{Shot, ShotConfig};

use super::gradcheck::{check, rel_err, Report, MAX_REL_ERR, STEP};

pub const TRIALS: u64 = 20;
const PER_TENSOR: usize = 3;

pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| scale * rng.standard_normal()).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random linear functional of the outputs, with dropout masks fixed by key.
pub fn localizer_trial(seed: u64) -> Report {
    let mut rng = Rng::keyed(seed, &[77]);
    let mut model = Localizer::init(seed, NormStats::identity()).unwrap();
    let x = random(4, 8, 1.0, &mut rng);
    let w = random(4, 2, 1.0, &mut rng);
    let objective = |m: &Localizer| {
        let (y, _) = m.forward(&x, Mode::Train(&mut Rng::keyed(seed, &[3]))).unwrap();
        dot(&y, &w)
    };
    let (_, tape) = model.forward(&x, Mode::Train(&mut Rng::keyed(seed, &[3]))).unwrap();
    let gx = model.backward(&tape, w.clone()).unwrap();

    let (ge, gr) = (model.extractor().params().clone(), model.regressor().params().clone());
    let mut report = check(&mut model, |m| m.extractor_mut().params_mut(), &ge, objective, PER_TENSOR, &mut rng);
    report.merge(check(&mut model, |m| m.regressor_mut().params_mut(), &gr, objective, PER_TENSOR, &mut rng));
    // input gradient
    for i in 0..x.len() {
        let at = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            let (y, _) = model.forward(&xp, Mode::Train(&mut Rng::keyed(seed, &[3]))).unwrap();
            dot(&y, &w)
        };
        let fd = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        let e = rel_err(gx.data()[i], fd, at(0.0));
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("input[{i}]");
        }
    }
    report
}

pub fn dann_trial(seed: u64) -> Report {
    let mut rng = Rng::keyed(seed, &[78]);
    let model = Localizer::init(seed, NormStats::identity()).unwrap();
    let batch = DannBatch {
        source_x: random(4, 8, 1.0, &mut rng),
        source_y: random(4, 2, 20.0, &mut rng),
        target_x: random(4, 8, 1.0, &mut rng),
    };
    let mut dann = Dann::new(&model, &DannConfig { seed, ..Default::default() }).unwrap();
    let key = [seed, 5];
    dann.accumulate_gradients(&batch, ExtractorObjective::Both, &mut Rng::keyed(seed, &key)).unwrap();
    let losses = |d: &Dann| d.losses(&batch, &mut Rng::keyed(seed, &key)).unwrap();
    let ge = dann.model.extractor().params().clone();
    let gr = dann.model.regressor().params().clone();
    let gd = dann.disc.net().params().clone();
    let mut report = check(&mut dann, |d| d.model.extractor_mut().params_mut(), &ge, |d| losses(d).feat(), PER_TENSOR, &mut rng);
    report.merge(check(&mut dann, |d| d.model.regressor_mut().params_mut(), &gr, |d| losses(d).reg, PER_TENSOR, &mut rng));
    report.merge(check(&mut dann, |d| d.disc.net_mut().params_mut(), &gd, |d| losses(d).disc, PER_TENSOR, &mut rng));
    report
}

pub fn shot_trial(seed: u64) -> Report {
    let mut rng = Rng::keyed(seed, &[79]);
    let mut model = Localizer::init(seed, NormStats::identity()).unwrap();
    // stand-in statistics; a random symmetric covariance keeps every term active
    let c = random(FEATURE_DIM, 3, 0.05, &mut rng);
    let mut cov = vec![0.0; FEATURE_DIM * FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        for j in 0..FEATURE_DIM {
            cov[i * FEATURE_DIM + j] = (0..3).map(|k| c.row(i)[k] * c.row(j)[k]).sum();
        }
    }
    model.source_stats = Some(SourceStats { pred_mean: [0.5, -0.2], pred_var: [0.3, 0.1], feat_dim: FEATURE_DIM, feat_cov: cov });
    let cfg = ShotConfig { seed, ..Default::default() };
    let mut shot = Shot::new(&model, &cfg).unwrap();
    let x = random(6, 8, 1.0, &mut rng);
    // one update first so the teacher differs from the student
    shot.step(&x, &[0]).unwrap();
    shot.model_mut().zero_grad();
    shot.accumulate_gradients(&x, &[1]).unwrap();
    let total = |s: &Shot| s.losses(&x, &[1]).unwrap().total;
    let grads = shot.model().extractor().params().clone();
    check(&mut shot, |s| s.model_mut().extractor_mut().params_mut(), &grads, total, PER_TENSOR, &mut rng)
}

/// Merged report over all seeded trials.
pub fn run_trials(trial: fn(u64) -> Report) -> Report {
    let mut all = Report::default();
    for seed in 0..TRIALS {
        all.merge(trial(seed));
    }
    all
}

pub fn describe(name: &str, r: &Report) -> String {
    format!(
        "{name}: max rel err {:.3e} (limit {MAX_REL_ERR:e}) at {}; {} checked, {} kinks",
        r.max_rel_err, r.worst, r.checked, r.kinks
    )
}
