//! Mean-teacher source-free adaptation with optional confidence-based
//! pseudo-label correction.

mod confidence;

pub use confidence::{
    compute_thresholds, correct_labels, probe_uncertainty, ProbeSettings, PseudoLabel, PseudoLabelSet, Thresholds,
    MIN_NEIGHBOR_DISTANCE,
};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::localizer::{Localizer, LocalizerAdam};
use crate::nn::{l1_loss, stream, AdamConfig, Mode, ParamSet, Rng, Tensor};

/// How the EMA coefficient is applied to the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaConvention {
    /// `teacher <- alpha * student + (1 - alpha) * teacher`.
    #[default]
    StudentWeighted,
    /// `teacher <- alpha * teacher + (1 - alpha) * student`, the usual decay form.
    TeacherWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MTLocConfig {
    pub alpha: f64,
    /// Variance of the Gaussian noise added in normalized feature space.
    pub noise_variance: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub confidence: bool,
    pub k: usize,
    pub c_x: f64,
    pub c_y: f64,
    pub n_probe: usize,
    /// Keep dropout active in the student's forward pass.
    pub dropout: bool,
    pub ema: EmaConvention,
    pub seed: u64,
}

impl Default for MTLocConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            noise_variance: 0.1,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            confidence: false,
            k: 2,
            c_x: 8.0,
            c_y: 4.0,
            n_probe: 10,
            dropout: true,
            ema: EmaConvention::StudentWeighted,
            seed: 0,
        }
    }
}

impl MTLocConfig {
    /// Plain mean-teacher adaptation.
    pub fn plain() -> Self {
        Self::default()
    }

    /// Mean teacher with confidence-based label correction.
    pub fn with_confidence() -> Self {
        Self {
            alpha: 0.8,
            confidence: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise_variance must be a finite value >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.c_x >= 0.0 && self.c_y >= 0.0) {
            return Err(Error::Config("threshold coefficients must be >= 0".into()));
        }
        if self.confidence && self.n_probe < 2 {
            return Err(Error::Config(format!("n_probe must be at least 2, got {}", self.n_probe)));
        }
        Ok(())
    }

    fn probe_settings(&self) -> ProbeSettings {
        ProbeSettings {
            noise_variance: self.noise_variance,
            n_probe: self.n_probe,
            seed: self.seed,
        }
    }
}

/// `teacher <- alpha * student + (1 - alpha) * teacher`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA coefficient must lie in [0, 1], got {alpha}")));
    }
    teacher.check_layout(student)?;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = alpha * sv + (1.0 - alpha) * *tv;
        }
    }
    Ok(())
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_decay(teacher: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    teacher.check_layout(student)?;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

/// Per-epoch adaptation diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    /// Mean distillation loss over the epoch's batches.
    pub kd_loss: f64,
    pub n_uncertain: usize,
    /// Thresholds of this epoch; `None` without the confidence module.
    pub thresholds: Option<Thresholds>,
}

impl EpochDiagnostics {
    pub const CSV_HEADER: &'static str = "epoch,kd_loss,n_uncertain,t_x,t_y";

    pub fn csv_row(&self) -> String {
        let (tx, ty) = match self.thresholds {
            Some(t) => (t.t_x.to_string(), t.t_y.to_string()),
            None => (String::new(), String::new()),
        };
        format!("{},{},{},{},{}", self.epoch, self.kd_loss, self.n_uncertain, tx, ty)
    }
}

/// State right after one batch update, handed to observers.
pub struct BatchSnapshot<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub teacher_before: &'a Localizer,
    pub student: &'a Localizer,
    pub teacher: &'a Localizer,
}

pub struct Adaptation {
    pub student: Localizer,
    pub teacher: Localizer,
    pub diagnostics: Vec<EpochDiagnostics>,
}

/// Stepwise mean-teacher adaptation. `adapt` drives it to completion.
pub struct MeanTeacher {
    cfg: MTLocConfig,
    teacher: Localizer,
    student: Localizer,
    adam: LocalizerAdam,
    inputs: Tensor,
    epoch: usize,
    diagnostics: Vec<EpochDiagnostics>,
}

impl MeanTeacher {
    pub fn new(source: &Localizer, target: &Dataset, cfg: &MTLocConfig) -> Result<Self> {
        cfg.validate()?;
        if target.is_labeled() {
            log::info!("ignoring labels of target set {}", target.name());
        }
        let student = source.clone();
        Ok(Self {
            cfg: cfg.clone(),
            teacher: source.clone(),
            adam: LocalizerAdam::new(&student, AdamConfig::with_lr(cfg.lr)),
            inputs: source.normalized_inputs(target),
            student,
            epoch: 0,
            diagnostics: Vec::new(),
        })
    }

    pub fn teacher(&self) -> &Localizer {
        &self.teacher
    }

    pub fn student(&self) -> &Localizer {
        &self.student
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Normalized target inputs, `[n, 8]`.
    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Pseudo labels the next epoch will train on, with its thresholds.
    pub fn pseudo_labels(&self) -> Result<(PseudoLabelSet, Option<Thresholds>)> {
        if !self.cfg.confidence {
            let labels = self.teacher.infer(&self.inputs)?;
            return Ok((PseudoLabelSet::from_labels(&labels), None));
        }
        let mut pls = probe_uncertainty(&self.teacher, &self.inputs, &self.cfg.probe_settings(), self.epoch as u64)?;
        let t = compute_thresholds(&mut pls, self.cfg.c_x, self.cfg.c_y)?;
        Ok((correct_labels(&pls, &self.inputs, self.cfg.k)?, Some(t)))
    }

    pub fn run_epoch(&mut self) -> Result<&EpochDiagnostics> {
        self.run_epoch_observed(None)
    }

    /// One pass over the target set. The observer, if any, sees a snapshot
    /// after every batch.
    pub fn run_epoch_observed(
        &mut self,
        mut observer: Option<&mut dyn FnMut(&BatchSnapshot<'_>)>,
    ) -> Result<&EpochDiagnostics> {
        let epoch = self.epoch;
        let (pls, thresholds) = self.pseudo_labels()?;
        if !pls.label_tensor(&(0..pls.len()).collect::<Vec<_>>()).all_finite() {
            return Err(Error::Numerical(format!("non-finite pseudo label at epoch {epoch}")));
        }
        let n = self.inputs.rows();
        let order = Rng::keyed(self.cfg.seed, &[stream::SHUFFLE, SALT, epoch as u64]).permutation(n);
        let std = self.cfg.noise_variance.sqrt();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut x = self.inputs.select_rows(idx);
            if std > 0.0 {
                for (row, &i) in x.data_mut().chunks_exact_mut(self.inputs.row_len()).zip(idx) {
                    let mut rng = Rng::keyed(self.cfg.seed, &[stream::AUGMENT, SALT, epoch as u64, i as u64]);
                    for v in row {
                        *v += rng.normal(std);
                    }
                }
            }
            let target = pls.label_tensor(idx);
            let mut rng = Rng::keyed(self.cfg.seed, &[stream::DROPOUT, SALT, epoch as u64, batch as u64]);
            let mode = if self.cfg.dropout { Mode::Train(&mut rng) } else { Mode::Eval };
            let (pred, tape) = self.student.forward(&x, mode)?;
            let (loss, grad) = l1_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite distillation loss at epoch {epoch}, batch {batch}"
                )));
            }
            self.student.zero_grad();
            self.student.backward(&tape, grad)?;
            self.adam.step(&mut self.student).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {m}")),
                other => other,
            })?;
            let before = observer.as_ref().map(|_| self.teacher.clone());
            self.update_teacher()?;
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(&BatchSnapshot {
                    epoch,
                    batch,
                    loss,
                    teacher_before: before,
                    student: &self.student,
                    teacher: &self.teacher,
                });
            }
            total += loss;
            batches += 1;
        }
        self.diagnostics.push(EpochDiagnostics {
            epoch,
            kd_loss: total / batches as f64,
            n_uncertain: pls.n_uncertain(),
            thresholds,
        });
        self.epoch += 1;
        Ok(self.diagnostics.last().expect("just pushed"))
    }

    fn update_teacher(&mut self) -> Result<()> {
        let rule = match self.cfg.ema {
            EmaConvention::StudentWeighted => ema_update,
            EmaConvention::TeacherWeighted => ema_decay,
        };
        let alpha = self.cfg.alpha;
        rule(self.teacher.extractor_mut().params_mut(), self.student.extractor().params(), alpha)?;
        rule(self.teacher.regressor_mut().params_mut(), self.student.regressor().params(), alpha)
    }

    pub fn diagnostics(&self) -> &[EpochDiagnostics] {
        &self.diagnostics
    }

    pub fn finish(self) -> Adaptation {
        let mut student = self.student;
        let cfg = &self.cfg;
        let kind = if cfg.confidence { "mtloc-conf" } else { "mtloc" };
        student.meta.insert("kind".into(), kind.into());
        student.meta.insert("alpha".into(), cfg.alpha.to_string());
        student.meta.insert("adapt_epochs".into(), self.epoch.to_string());
        student.meta.insert("adapt_seed".into(), cfg.seed.to_string());
        if cfg.confidence {
            student.meta.insert("k".into(), cfg.k.to_string());
            student.meta.insert("c_x".into(), cfg.c_x.to_string());
            student.meta.insert("c_y".into(), cfg.c_y.to_string());
        }
        Adaptation {
            student,
            teacher: self.teacher,
            diagnostics: self.diagnostics,
        }
    }
}

const SALT: u64 = 21;

/// Adapts `source` to the unlabeled `target` set and returns the student.
pub fn adapt(source: &Localizer, target: &Dataset, cfg: &MTLocConfig) -> Result<Adaptation> {
    let mut mt = MeanTeacher::new(source, target, cfg)?;
    for _ in 0..cfg.epochs {
        let d = mt.run_epoch()?;
        log::debug!("mtloc epoch {} kd {:.4} uncertain {}", d.epoch, d.kd_loss, d.n_uncertain);
    }
    Ok(mt.finish())
}
