//! One flat TOML file holds every hyperparameter, grouped by dotted key
//! prefix (`mtloc.alpha = 0.7`). Values from `--set key=value` win over the
//! file, which wins over the built-in defaults.

use std::path::Path;

use mtloc::dann::DannConfig;
use mtloc::data::SynthConfig;
use mtloc::localizer::TrainConfig;
use mtloc::mtloc::MTLocConfig;
use mtloc::shot::ShotConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of samples kept for training.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Cell edge in meters.
    pub cell: f64,
    /// Receiver positions written into the CSV header.
    pub receivers: Vec<[f64; 2]>,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            cell: 1.0,
            receivers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.7, 0.75, 0.8, 0.9],
            ks: vec![1, 2, 3, 4],
            n_folds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub oracle: TrainConfig,
    pub mtloc: MTLocConfig,
    pub mtloc_conf: MTLocConfig,
    pub dann: DannConfig,
    pub shot: ShotConfig,
    pub heatmap: HeatmapConfig,
    pub cv: CvConfig,
    pub synth_source: SynthConfig,
    pub synth_target: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            oracle: TrainConfig::default(),
            mtloc: MTLocConfig::plain(),
            mtloc_conf: MTLocConfig::with_confidence(),
            dann: DannConfig::default(),
            shot: ShotConfig::default(),
            heatmap: HeatmapConfig::default(),
            cv: CvConfig::default(),
            synth_source: SynthConfig::source_layout(),
            synth_target: SynthConfig::target_layout(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(mtloc::Error::Config(msg.into()))
}

/// Parses the right-hand side of `--set`: any TOML value, else a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then the overrides. Partial
    /// sections keep the remaining defaults of their section.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = Table::try_from(Self::default()).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let file = text
                .parse::<Table>()
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(config_err(format!("split.ratio {} outside (0, 1)", self.split.ratio)));
        }
        self.train.validate()?;
        self.oracle.validate()?;
        self.mtloc.validate()?;
        self.mtloc_conf.validate()?;
        self.dann.validate()?;
        self.shot.validate()?;
        self.synth_source.validate()?;
        self.synth_target.validate()?;
        if !(self.heatmap.cell > 0.0 && self.heatmap.cell.is_finite()) {
            return Err(config_err("heatmap.cell must be positive"));
        }
        if self.cv.alphas.is_empty() || self.cv.ks.is_empty() {
            return Err(config_err("cv.alphas and cv.ks must be non-empty"));
        }
        if self.cv.n_folds < 2 {
            return Err(config_err("cv.n_folds must be at least 2"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
