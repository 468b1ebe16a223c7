//! Command-line front end: synthetic data generation, source training,
//! adaptation, evaluation, heatmaps, cross-validation sweeps and manifest
//! reruns.

mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{dispatch, execute, Outcome};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

#[derive(Parser, Debug, Clone)]
#[command(name = "mtloc", version, about = "Source-free domain adaptation for RF indoor localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default, PartialEq)]
pub struct ConfigArgs {
    /// Flat TOML file with dotted keys, e.g. `mtloc_conf.alpha = 0.8`.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mtloc,
    MtlocConf,
    Dann,
    Shot,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mtloc => "mtloc",
            Method::MtlocConf => "mtloc-conf",
            Method::Dann => "dann",
            Method::Shot => "shot",
            Method::Oracle => "oracle",
        }
    }

    /// Methods that only see the model artifact and the target set.
    pub fn is_source_free(self) -> bool {
        matches!(self, Method::Mtloc | Method::MtlocConf | Method::Shot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CvMethod {
    Mtloc,
    MtlocConf,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Generate synthetic source and target rooms plus train/test splits.
    GenSynth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the localizer on a labeled source CSV.
    Train {
        #[arg(long)]
        source_csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column mapping TOML for non-canonical headers.
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adapt a trained model to a target CSV.
    Adapt {
        #[arg(value_enum)]
        method: Method,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_csv: PathBuf,
        /// Labeled source data; only read by `dann`.
        #[arg(long)]
        source_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Metrics on a labeled CSV; several models are aggregated as runs.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label of the aggregate line.
        #[arg(long, default_value = "mean")]
        label: String,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-cell mean distance error as CSV, PGM and scale sidecar.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Output path without extension.
        #[arg(long)]
        out_stem: PathBuf,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// k-fold sweep over `cv.alphas` x `cv.ks` on a labeled target set.
    Cv {
        #[arg(value_enum)]
        method: CvMethod,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the resolved configuration.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-execute a recorded command and compare its artifacts.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write the new artifacts here instead of over the old ones.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn push_path(argv: &mut Vec<String>, flag: &str, p: &Path) {
    argv.push(flag.into());
    argv.push(p.to_string_lossy().into_owned());
}

fn push_opt(argv: &mut Vec<String>, flag: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        push_path(argv, flag, p);
    }
}

fn moved(dir: &Path, p: &Path) -> PathBuf {
    dir.join(p.file_name().unwrap_or(p.as_os_str()))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::Train { .. } => "train",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Heatmap { .. } => "heatmap",
            Command::Cv { .. } => "cv",
            Command::ShowConfig { .. } => "show-config",
            Command::Rerun { .. } => "rerun",
        }
    }

    pub fn config_args(&self) -> Option<&ConfigArgs> {
        match self {
            Command::GenSynth { cfg, .. }
            | Command::Train { cfg, .. }
            | Command::Adapt { cfg, .. }
            | Command::Eval { cfg, .. }
            | Command::Heatmap { cfg, .. }
            | Command::Cv { cfg, .. }
            | Command::ShowConfig { cfg } => Some(cfg),
            Command::Rerun { .. } => None,
        }
    }

    /// Canonical arguments without config flags; the manifest stores the
    /// resolved configuration instead.
    pub fn to_argv(&self) -> Vec<String> {
        let mut a = vec![self.name().to_string()];
        match self {
            Command::GenSynth { out_dir, .. } => push_path(&mut a, "--out-dir", out_dir),
            Command::Train { source_csv, out, mapping, .. } => {
                push_path(&mut a, "--source-csv", source_csv);
                push_path(&mut a, "--out", out);
                push_opt(&mut a, "--mapping", mapping);
            }
            Command::Adapt { method, model, target_csv, source_csv, out, mapping, .. } => {
                a.push(method.name().into());
                push_path(&mut a, "--model", model);
                push_path(&mut a, "--target-csv", target_csv);
                push_opt(&mut a, "--source-csv", source_csv);
                push_path(&mut a, "--out", out);
                push_opt(&mut a, "--mapping", mapping);
            }
            Command::Eval { models, csv, out, label, mapping, .. } => {
                for m in models {
                    push_path(&mut a, "--model", m);
                }
                push_path(&mut a, "--csv", csv);
                push_path(&mut a, "--out", out);
                a.push("--label".into());
                a.push(label.clone());
                push_opt(&mut a, "--mapping", mapping);
            }
            Command::Heatmap { model, csv, out_stem, mapping, .. } => {
                push_path(&mut a, "--model", model);
                push_path(&mut a, "--csv", csv);
                push_path(&mut a, "--out-stem", out_stem);
                push_opt(&mut a, "--mapping", mapping);
            }
            Command::Cv { method, model, target_csv, out, mapping, .. } => {
                a.push(match method {
                    CvMethod::Mtloc => "mtloc".into(),
                    CvMethod::MtlocConf => "mtloc-conf".into(),
                });
                push_path(&mut a, "--model", model);
                push_path(&mut a, "--target-csv", target_csv);
                push_path(&mut a, "--out", out);
                push_opt(&mut a, "--mapping", mapping);
            }
            Command::ShowConfig { .. } => {}
            Command::Rerun { manifest, out_dir } => {
                push_path(&mut a, "--manifest", manifest);
                push_opt(&mut a, "--out-dir", out_dir);
            }
        }
        a
    }

    /// Points every output path into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        match self {
            Command::GenSynth { out_dir, .. } => *out_dir = dir.to_path_buf(),
            Command::Train { out, .. } | Command::Adapt { out, .. } | Command::Eval { out, .. } | Command::Cv { out, .. } => {
                *out = moved(dir, out)
            }
            Command::Heatmap { out_stem, .. } => *out_stem = moved(dir, out_stem),
            Command::ShowConfig { .. } | Command::Rerun { .. } => {}
        }
    }
}
