//! Central-difference gradient oracle.

use mtloc::nn::{ParamSet, Rng};

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where the central quotients at `h` and `h / 2` disagree
    /// for every tried `h`, i.e. a ReLU or absolute-value kink sits right at
    /// the point; these are not compared. A kink within `STEP` but not
    /// within `STEP / 10` is compared at the smaller step.
    pub kinks: usize,
    pub worst: String,
}

impl Report {
    pub fn merge(&mut self, other: Report) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR && self.checked > 0 && self.kinks * 20 <= self.checked
    }
}

/// Relative error with a floor on the denominator of `1e-6 * max(1, |f|)`:
/// below that, round-off in `f` dominates any central quotient.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-6 * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss` at
/// `per_tensor` random coordinates of every parameter tensor. `params`
/// selects the perturbed set inside `state`; every coordinate is restored
/// bit-exactly after probing.
pub fn check<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> &mut ParamSet,
    analytic: &ParamSet,
    loss: impl Fn(&S) -> f64,
    per_tensor: usize,
    rng: &mut Rng,
) -> Report {
    let mut report = Report::default();
    let base = loss(&*state);
    for (t, p) in analytic.iter().enumerate() {
        for _ in 0..per_tensor {
            let i = rng.below(p.grad.len());
            let original = params(state).get(t).value.data()[i];
            let mut at = |delta: f64| {
                params(state).get_mut(t).value.data_mut()[i] = original + delta;
                let l = loss(state);
                params(state).get_mut(t).value.data_mut()[i] = original;
                l
            };
            let mut central = None;
            for h in [STEP, STEP / 10.0, STEP / 100.0] {
                let full = (at(h) - at(-h)) / (2.0 * h);
                let half = (at(h / 2.0) - at(-h / 2.0)) / h;
                if rel_err(full, half, base) <= MAX_REL_ERR {
                    central = Some(full);
                    break;
                }
            }
            let Some(central) = central else {
                report.kinks += 1;
                continue;
            };
            let a = p.grad.data()[i];
            let e = rel_err(a, central, base);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]: analytic {a:e} numeric {central:e}", p.name);
            }
        }
    }
    report
}
