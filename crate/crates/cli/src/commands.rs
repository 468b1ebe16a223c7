use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtloc::dann::{run_dann, DannEpoch};
use mtloc::data::{generate_synthetic, load_csv, split_train_test, write_csv, ColumnMapping, Dataset};
use mtloc::eval::{aggregate_runs, cross_validate, evaluate, heatmap, MetricsReport};
use mtloc::localizer::{finetune_oracle, load, save, train_source, Localizer, TrainHistory};
use mtloc::mtloc::{adapt, EpochDiagnostics};
use mtloc::shot::{run_shot, ShotEpoch};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{by_file_name, hash_file, manifest_path_for, RunManifest};
use crate::{Cli, Command, CvMethod, Method};

/// Result of one executed command.
pub struct Outcome {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

/// Tracks every file read or written so the manifest can hash them.
#[derive(Default)]
struct Ctx {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn key(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn io_err(p: &Path, e: std::io::Error) -> CliError {
    mtloc::Error::Io { path: p.into(), source: e }.into()
}

fn data_err(msg: impl Into<String>) -> CliError {
    mtloc::Error::Data(msg.into()).into()
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Ctx {
    fn input(&mut self, p: &Path) -> CliResult<()> {
        self.inputs.insert(key(p), hash_file(p)?);
        Ok(())
    }

    fn mapping(&mut self, p: Option<&Path>) -> CliResult<ColumnMapping> {
        match p {
            None => Ok(ColumnMapping::default()),
            Some(p) => {
                self.input(p)?;
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                Ok(ColumnMapping::from_toml_str(&text)?)
            }
        }
    }

    fn dataset(&mut self, p: &Path, mapping: &ColumnMapping) -> CliResult<Dataset> {
        self.input(p)?;
        Ok(load_csv(p, mapping)?)
    }

    fn labeled_dataset(&mut self, p: &Path, mapping: &ColumnMapping, why: &str) -> CliResult<Dataset> {
        let d = self.dataset(p, mapping)?;
        if !d.is_labeled() {
            return Err(data_err(format!("{} has no x/y labels; {why}", p.display())));
        }
        Ok(d)
    }

    fn model(&mut self, p: &Path) -> CliResult<Localizer> {
        self.input(p)?;
        Ok(load(p)?)
    }

    fn output(&mut self, p: &Path) -> CliResult<()> {
        self.outputs.insert(key(p), hash_file(p)?);
        Ok(())
    }

    fn write(&mut self, p: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        ensure_parent(p)?;
        std::fs::write(p, bytes).map_err(|e| io_err(p, e))?;
        self.output(p)
    }

    fn write_dataset(&mut self, d: &Dataset, p: &Path) -> CliResult<()> {
        ensure_parent(p)?;
        write_csv(d, p)?;
        self.output(p)
    }

    /// Saves `model` tagged with the name of the manifest describing it.
    fn write_model(&mut self, mut model: Localizer, p: &Path, manifest: &Path) -> CliResult<()> {
        ensure_parent(p)?;
        model.meta.insert("manifest".into(), file_name(manifest));
        save(&model, p)?;
        self.output(p)
    }
}

fn csv_lines(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Entry point for a parsed command line.
pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Rerun { manifest, out_dir } => rerun(manifest, out_dir.as_deref()),
        Command::ShowConfig { cfg } => {
            let resolved = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
            print!("{}", resolved.to_toml());
            Ok(())
        }
        cmd => {
            let args = cmd.config_args().expect("every recordable command takes config flags");
            let cfg = RunConfig::resolve(args.config.as_deref(), &args.set)?;
            execute(cmd, &cfg).map(|_| ())
        }
    }
}

/// Runs `cmd` under the resolved `cfg` and writes its manifest.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> CliResult<Outcome> {
    let start = Instant::now();
    let mut ctx = Ctx::default();
    let (manifest_path, seed) = match cmd {
        Command::GenSynth { out_dir, .. } => gen_synth(&mut ctx, cfg, out_dir)?,
        Command::Train { source_csv, out, mapping, .. } => train(&mut ctx, cfg, source_csv, out, mapping.as_deref())?,
        Command::Adapt { method, model, target_csv, source_csv, out, mapping, .. } => adapt_cmd(
            &mut ctx,
            cfg,
            *method,
            model,
            target_csv,
            source_csv.as_deref(),
            out,
            mapping.as_deref(),
        )?,
        Command::Eval { models, csv, out, label, mapping, .. } => eval(&mut ctx, models, csv, out, label, mapping.as_deref())?,
        Command::Heatmap { model, csv, out_stem, mapping, .. } => heatmap_cmd(&mut ctx, cfg, model, csv, out_stem, mapping.as_deref())?,
        Command::Cv { method, model, target_csv, out, mapping, .. } => cv(&mut ctx, cfg, *method, model, target_csv, out, mapping.as_deref())?,
        Command::ShowConfig { .. } | Command::Rerun { .. } => {
            return Err(CliError::Usage(format!("`{}` does not produce a manifest", cmd.name())))
        }
    };
    let manifest = RunManifest {
        tool: format!("mtloc {}", env!("CARGO_PKG_VERSION")),
        command: cmd.name().into(),
        argv: cmd.to_argv(),
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        inputs: ctx.inputs,
        outputs: ctx.outputs,
        config: cfg.clone(),
    };
    manifest.write(&manifest_path)?;
    println!("manifest {}", manifest_path.display());
    Ok(Outcome { manifest_path, manifest })
}

fn gen_synth(ctx: &mut Ctx, cfg: &RunConfig, out_dir: &Path) -> CliResult<(PathBuf, u64)> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for (name, synth) in [("source", &cfg.synth_source), ("target", &cfg.synth_target)] {
        let data = generate_synthetic(synth)?;
        let (train, test) = split_train_test(&data, cfg.split.ratio, cfg.split.seed)?;
        ctx.write_dataset(&data, &out_dir.join(format!("{name}.csv")))?;
        ctx.write_dataset(&train, &out_dir.join(format!("{name}_train.csv")))?;
        ctx.write_dataset(&test, &out_dir.join(format!("{name}_test.csv")))?;
        println!("{name}: {} samples ({} train / {} test)", data.len(), train.len(), test.len());
    }
    Ok((out_dir.join("synth.manifest.toml"), cfg.synth_source.seed))
}

fn train(ctx: &mut Ctx, cfg: &RunConfig, source_csv: &Path, out: &Path, mapping: Option<&Path>) -> CliResult<(PathBuf, u64)> {
    let mapping = ctx.mapping(mapping)?;
    let source = ctx.labeled_dataset(source_csv, &mapping, "training needs labeled source data")?;
    let (model, history) = train_source(&source, &cfg.train)?;
    let report = evaluate(&model, &source)?;
    let manifest = manifest_path_for(out);
    ctx.write_model(model, out, &manifest)?;
    ctx.write(&with_suffix(out, ".history.csv"), csv_lines(TrainHistory::CSV_HEADER, history.csv_rows()))?;
    println!(
        "trained {} epochs on {} samples; training-set MAE(d) {:.3} m",
        history.epochs.len(),
        source.len(),
        report.mean.mae_d
    );
    Ok((manifest, cfg.train.seed))
}

#[allow(clippy::too_many_arguments)]
fn adapt_cmd(
    ctx: &mut Ctx,
    cfg: &RunConfig,
    method: Method,
    model_path: &Path,
    target_csv: &Path,
    source_csv: Option<&Path>,
    out: &Path,
    mapping: Option<&Path>,
) -> CliResult<(PathBuf, u64)> {
    if method.is_source_free() && source_csv.is_some() {
        log::warn!("--source-csv ignored: {} is source-free", method.name());
    }
    if method == Method::Dann && source_csv.is_none() {
        return Err(CliError::Usage("dann requires access to source data; pass --source-csv".into()));
    }
    let mapping = ctx.mapping(mapping)?;
    let unlabeled = ColumnMapping { labels: false, ..mapping.clone() };
    let model = ctx.model(model_path)?;
    let (adapted, diagnostics, seed) = match method {
        Method::Mtloc | Method::MtlocConf => {
            let mc = if method == Method::Mtloc { &cfg.mtloc } else { &cfg.mtloc_conf };
            let target = ctx.dataset(target_csv, &unlabeled)?;
            let ad = adapt(&model, &target, mc)?;
            let rows = ad.diagnostics.iter().map(EpochDiagnostics::csv_row);
            (ad.student, csv_lines(EpochDiagnostics::CSV_HEADER, rows), mc.seed)
        }
        Method::Shot => {
            let target = ctx.dataset(target_csv, &unlabeled)?;
            let (m, epochs) = run_shot(&model, &target, &cfg.shot)?;
            (m, csv_lines(ShotEpoch::CSV_HEADER, epochs.iter().map(ShotEpoch::csv_row)), cfg.shot.seed)
        }
        Method::Dann => {
            let source_csv = source_csv.expect("checked above");
            let source = ctx.labeled_dataset(source_csv, &mapping, "dann needs labeled source data")?;
            let target = ctx.dataset(target_csv, &unlabeled)?;
            let (m, epochs) = run_dann(&model, &source, &target, &cfg.dann)?;
            (m, csv_lines(DannEpoch::CSV_HEADER, epochs.iter().map(DannEpoch::csv_row)), cfg.dann.seed)
        }
        Method::Oracle => {
            let target = ctx.labeled_dataset(target_csv, &mapping, "oracle fine-tuning needs target labels")?;
            let (m, history) = finetune_oracle(&model, &target, &cfg.oracle)?;
            (m, csv_lines(TrainHistory::CSV_HEADER, history.csv_rows()), cfg.oracle.seed)
        }
    };
    let manifest = manifest_path_for(out);
    ctx.write_model(adapted, out, &manifest)?;
    ctx.write(&with_suffix(out, ".diagnostics.csv"), diagnostics)?;
    println!("adapted with {} -> {}", method.name(), out.display());
    Ok((manifest, seed))
}

fn eval(ctx: &mut Ctx, models: &[PathBuf], csv: &Path, out: &Path, label: &str, mapping: Option<&Path>) -> CliResult<(PathBuf, u64)> {
    let mapping = ctx.mapping(mapping)?;
    let data = ctx.labeled_dataset(csv, &mapping, "evaluation needs ground truth")?;
    let mut runs: Vec<(String, MetricsReport)> = Vec::with_capacity(models.len());
    for p in models {
        let model = ctx.model(p)?;
        runs.push((file_name(p), evaluate(&model, &data)?));
    }
    let reports: Vec<MetricsReport> = runs.iter().map(|(_, r)| r.clone()).collect();
    let total = aggregate_runs(&reports)?;
    let rows = runs.iter().map(|(n, r)| r.csv_row(n)).chain(std::iter::once(total.csv_row(label)));
    ctx.write(out, csv_lines(&MetricsReport::csv_header(), rows))?;
    println!("{}", MetricsReport::table_header());
    for (n, r) in &runs {
        println!("{}", r.table_row(n));
    }
    println!("{}", total.table_row(label));
    Ok((manifest_path_for(out), 0))
}

fn heatmap_cmd(ctx: &mut Ctx, cfg: &RunConfig, model: &Path, csv: &Path, out_stem: &Path, mapping: Option<&Path>) -> CliResult<(PathBuf, u64)> {
    let mapping = ctx.mapping(mapping)?;
    let data = ctx.labeled_dataset(csv, &mapping, "the heatmap bins by true position")?;
    let model = ctx.model(model)?;
    let preds: Vec<[f64; 2]> = model.predict(&data)?.iter().map(|p| p.as_array()).collect();
    let grid = heatmap(&preds, &data.labels()?, cfg.heatmap.cell, None)?;
    ensure_parent(out_stem)?;
    grid.write_all(out_stem, &cfg.heatmap.receivers)?;
    for ext in [".csv", ".pgm", ".scale.txt"] {
        ctx.output(&with_suffix(out_stem, ext))?;
    }
    println!(
        "{}x{} cells of {} m, weighted mean error {:.3} m",
        grid.rows,
        grid.cols,
        grid.cell,
        grid.weighted_mean()
    );
    Ok((manifest_path_for(out_stem), 0))
}

fn cv(
    ctx: &mut Ctx,
    cfg: &RunConfig,
    method: CvMethod,
    model: &Path,
    target_csv: &Path,
    out: &Path,
    mapping: Option<&Path>,
) -> CliResult<(PathBuf, u64)> {
    let mapping = ctx.mapping(mapping)?;
    let target = ctx.labeled_dataset(target_csv, &mapping, "validation folds need labels")?;
    let model = ctx.model(model)?;
    let base = match method {
        CvMethod::Mtloc => &cfg.mtloc,
        CvMethod::MtlocConf => &cfg.mtloc_conf,
    };
    // k only matters when the confidence module is on
    let ks = if base.confidence { cfg.cv.ks.clone() } else { vec![base.k] };
    let grid: Vec<(f64, usize)> = cfg.cv.alphas.iter().flat_map(|&a| ks.iter().map(move |&k| (a, k))).collect();
    let result = cross_validate(&target, &grid, cfg.cv.n_folds, cfg.cv.seed, |&(alpha, k), fit, held| {
        let mut c = base.clone();
        c.alpha = alpha;
        c.k = k;
        let ad = adapt(&model, &fit.unlabeled(), &c)?;
        Ok(ad.student.predict(held)?.iter().map(|p| p.as_array()).collect())
    })?;
    let mut header = String::from("alpha,k");
    for f in 1..=cfg.cv.n_folds {
        write!(header, ",fold_{f}").unwrap();
    }
    header.push_str(",mean_mae_d");
    let rows = result.entries.iter().map(|e| {
        let mut r = format!("{},{}", e.config.0, e.config.1);
        for v in &e.fold_mae_d {
            write!(r, ",{v}").unwrap();
        }
        write!(r, ",{}", e.mean_mae_d).unwrap();
        r
    });
    ctx.write(out, csv_lines(&header, rows))?;

    let mut table = format!("{:>8}", "alpha \\ k");
    for k in &ks {
        write!(table, " {k:>8}").unwrap();
    }
    for &a in &cfg.cv.alphas {
        write!(table, "\n{a:>8}").unwrap();
        for e in result.entries.iter().filter(|e| e.config.0 == a) {
            write!(table, " {:>8.3}", e.mean_mae_d).unwrap();
        }
    }
    println!("{table}");
    println!("best alpha {} k {}", result.best.0, result.best.1);
    Ok((manifest_path_for(out), cfg.cv.seed))
}

fn rerun(manifest_path: &Path, out_dir: Option<&Path>) -> CliResult<()> {
    let recorded = RunManifest::read(manifest_path)?;
    for (p, h) in &recorded.inputs {
        if hash_file(Path::new(p))? != *h {
            return Err(data_err(format!("input {p} changed since the manifest was written")));
        }
    }
    let argv = std::iter::once("mtloc".to_string()).chain(recorded.argv.iter().cloned());
    let mut cmd = <Cli as clap::Parser>::try_parse_from(argv)
        .map_err(|e| CliError::Usage(format!("manifest arguments: {e}")))?
        .command;
    if matches!(cmd, Command::Rerun { .. } | Command::ShowConfig { .. }) {
        return Err(CliError::Usage(format!("cannot rerun `{}`", cmd.name())));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        cmd.redirect_outputs(dir);
    }
    let outcome = execute(&cmd, &recorded.config)?;
    let before = by_file_name(&recorded.outputs);
    let after = by_file_name(&outcome.manifest.outputs);
    let mut differing = Vec::new();
    for (name, hash) in &before {
        let same = after.get(name) == Some(hash);
        println!("{} {name}", if same { "identical" } else { "DIFFERS" });
        if !same {
            differing.push(name.clone());
        }
    }
    if differing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(differing.join(", ")))
    }
}
