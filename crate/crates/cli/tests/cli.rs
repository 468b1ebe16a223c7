use std::path::{Path, PathBuf};
use std::process::Command;

use mtloc::data::{load_csv, ColumnMapping};
use mtloc_cli::RunManifest;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mtloc(dir: &Path, args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_mtloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = mtloc(dir, args);
    assert_eq!(o.code, 0, "{args:?}\nstdout: {}\nstderr: {}", o.stdout, o.stderr);
    o.stdout
}

/// Sparse sampling keeps every fixture small.
const SMALL: [&str; 8] = [
    "--set",
    "synth_source.sample_interval=1.0",
    "--set",
    "synth_target.sample_interval=1.0",
    "--set",
    "train.epochs=4",
    "--set",
    "mtloc_conf.epochs=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

/// Generated data plus a briefly trained source model.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["gen-synth", "--out-dir", "d"]));
    ok(dir.path(), &with_small(&["train", "--source-csv", "d/source_train.csv", "--out", "m/src.bin"]));
    dir
}

fn manifest(dir: &Path, rel: &str) -> RunManifest {
    RunManifest::read(&dir.join(rel)).unwrap()
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_synth_is_reproducible_and_shifted() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["gen-synth", "--out-dir", "a"]));
    ok(dir.path(), &with_small(&["gen-synth", "--out-dir", "b"]));
    for f in ["source.csv", "target.csv", "target_train.csv", "target_test.csv"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    let s = load_csv(dir.path().join("a/source.csv"), &ColumnMapping::default()).unwrap();
    let t = load_csv(dir.path().join("a/target.csv"), &ColumnMapping::default()).unwrap();
    let mean = |d: &mtloc::data::Dataset| -> Vec<f64> {
        (0..8).map(|f| d.samples().iter().map(|x| x.features[f]).sum::<f64>() / d.len() as f64).collect()
    };
    let gap: f64 = mean(&s).iter().zip(mean(&t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // larger than the 0.5 dB shadowing std
    assert!(gap > 0.5, "feature gap {gap}");
    let m = manifest(dir.path(), "a/synth.manifest.toml");
    assert_eq!(m.outputs.len(), 6);
    assert!(m.inputs.is_empty());
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtloc(dir.path(), &["gen-synth", "--out-dir", "d", "--config", "missing.toml"]);
    assert_eq!(o.code, 2);
    let o = mtloc(dir.path(), &["gen-synth", "--out-dir", "d", "--set", "mtloc.alpha=3"]);
    assert_eq!(o.code, 2);
    let o = mtloc(dir.path(), &["adapt", "nonsense"]);
    assert_eq!(o.code, 2);
}

#[test]
fn train_refuses_unlabeled_csv_and_records_manifest() {
    let dir = fixture();
    let p = dir.path();
    let m = manifest(p, "m/src.bin.manifest.toml");
    assert_eq!(m.command, "train");
    assert!(m.inputs.contains_key("d/source_train.csv"));
    assert!(m.outputs.contains_key("m/src.bin"));
    assert!(m.outputs.contains_key("m/src.bin.history.csv"));
    let model = mtloc::localizer::load(p.join("m/src.bin")).unwrap();
    assert_eq!(model.meta["manifest"], "src.bin.manifest.toml");

    std::fs::write(p.join("nolabels.csv"), "r1x,r1y,r2x,r2y,r3x,r3y,r4x,r4y\n1,2,3,4,5,6,7,8\n1,2,3,4,5,6,7,9\n").unwrap();
    let o = mtloc(p, &["train", "--source-csv", "nolabels.csv", "--out", "x.bin"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(o.stderr.contains("no x/y labels"), "{}", o.stderr);
    assert!(!p.join("x.bin").exists());
}

#[test]
fn source_free_methods_never_read_the_source_csv() {
    let dir = fixture();
    let p = dir.path();
    for method in ["mtloc", "mtloc-conf", "shot"] {
        let out = format!("m/{method}.bin");
        // a path that cannot be opened: any read attempt would fail
        ok(
            p,
            &with_small(&[
                "adapt", method, "--model", "m/src.bin", "--target-csv", "d/target_train.csv",
                "--source-csv", "does/not/exist.csv", "--out", &out, "--set", "mtloc.epochs=1", "--set", "shot.epochs=1",
            ]),
        );
        // a readable source file is ignored as well
        ok(
            p,
            &with_small(&[
                "adapt", method, "--model", "m/src.bin", "--target-csv", "d/target_train.csv",
                "--source-csv", "d/source_train.csv", "--out", &out, "--set", "mtloc.epochs=1", "--set", "shot.epochs=1",
            ]),
        );
        let m = manifest(p, &format!("{out}.manifest.toml"));
        let inputs: Vec<&String> = m.inputs.keys().collect();
        assert_eq!(inputs, vec!["d/target_train.csv", "m/src.bin"], "{method}");
        assert!(p.join(format!("{out}.diagnostics.csv")).exists());
    }
}

#[test]
fn dann_requires_source_and_oracle_requires_labels() {
    let dir = fixture();
    let p = dir.path();
    let o = mtloc(p, &["adapt", "dann", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "x.bin"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("requires access to source data"), "{}", o.stderr);

    ok(
        p,
        &with_small(&[
            "adapt", "dann", "--model", "m/src.bin", "--target-csv", "d/target_train.csv",
            "--source-csv", "d/source_train.csv", "--out", "m/dann.bin", "--set", "dann.epochs=1",
        ]),
    );
    let m = manifest(p, "m/dann.bin.manifest.toml");
    assert!(m.inputs.contains_key("d/source_train.csv"));
    let diag = String::from_utf8(read(p.join("m/dann.bin.diagnostics.csv"))).unwrap();
    assert!(diag.starts_with("epoch,l_reg,l_disc,l_feat\n0,"));

    // the target file keeps its labels, so strip them
    let t = load_csv(p.join("d/target_train.csv"), &ColumnMapping::default()).unwrap();
    mtloc::data::write_csv(&t.unlabeled(), p.join("unl.csv")).unwrap();
    let o = mtloc(p, &["adapt", "oracle", "--model", "m/src.bin", "--target-csv", "unl.csv", "--out", "x.bin"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
}

#[test]
fn tuned_confidence_settings_are_accepted() {
    let dir = fixture();
    let p = dir.path();
    ok(
        p,
        &with_small(&[
            "adapt", "mtloc-conf", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "m/c.bin",
            "--set", "mtloc_conf.alpha=0.8", "--set", "mtloc_conf.k=2", "--set", "mtloc_conf.c_x=8", "--set", "mtloc_conf.c_y=4",
        ]),
    );
    let m = mtloc::localizer::load(p.join("m/c.bin")).unwrap();
    assert_eq!(m.meta["kind"], "mtloc-conf");
    assert_eq!((m.meta["alpha"].as_str(), m.meta["k"].as_str()), ("0.8", "2"));
    assert_eq!((m.meta["c_x"].as_str(), m.meta["c_y"].as_str()), ("8", "4"));
    let diag = String::from_utf8(read(p.join("m/c.bin.diagnostics.csv"))).unwrap();
    assert!(diag.starts_with("epoch,kd_loss,n_uncertain,t_x,t_y\n0,"));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let dir = fixture();
    let o = mtloc(dir.path(), &with_small(&["train", "--source-csv", "d/source_train.csv", "--out", "x.bin", "--set", "train.lr=1e300"]));
    assert_eq!(o.code, 4, "{}", o.stderr);
    assert!(o.stderr.contains("numerical failure"));
}

#[test]
fn eval_aggregates_runs_with_spread() {
    let dir = fixture();
    let p = dir.path();
    ok(p, &with_small(&["train", "--source-csv", "d/source_train.csv", "--out", "m/src2.bin", "--set", "train.seed=1"]));
    let stdout = ok(p, &["eval", "--model", "m/src.bin", "--model", "m/src2.bin", "--csv", "d/source_test.csv", "--out", "r.csv", "--label", "source"]);
    assert!(stdout.contains("±"));
    let report = String::from_utf8(read(p.join("r.csv"))).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("source,2,"));
    let std_d: f64 = lines[3].split(',').nth(7).unwrap().parse().unwrap();
    assert!(std_d > 0.0);

    let o = mtloc(p, &["eval", "--model", "m/src.bin", "--csv", "d/missing.csv", "--out", "r2.csv"]);
    assert_eq!(o.code, 3);
}

#[test]
fn heatmap_writes_grid_image_and_scale() {
    let dir = fixture();
    let p = dir.path();
    ok(p, &["heatmap", "--model", "m/src.bin", "--csv", "d/source_test.csv", "--out-stem", "h/src", "--set", "heatmap.receivers=[[5,0.5],[0.5,5]]"]);
    let csv = String::from_utf8(read(p.join("h/src.csv"))).unwrap();
    assert!(csv.contains("# receivers R1=(5,0.5) R2=(0.5,5)"));
    let pgm = read(p.join("h/src.pgm"));
    assert!(pgm.starts_with(b"P5\n"));
    assert!(p.join("h/src.scale.txt").exists());
    assert_eq!(manifest(p, "h/src.manifest.toml").outputs.len(), 3);
}

#[test]
fn cv_sweep_has_the_alpha_by_k_shape() {
    let dir = fixture();
    let p = dir.path();
    let stdout = ok(p, &with_small(&["cv", "mtloc-conf", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "cv.csv", "--set", "cv.n_folds=2"]));
    let sweep = String::from_utf8(read(p.join("cv.csv"))).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "alpha,k,fold_1,fold_2,mean_mae_d");
    assert_eq!(lines.len(), 1 + 16);
    assert!(stdout.contains("best alpha"));
    // without the confidence module k is not swept
    ok(p, &with_small(&["cv", "mtloc", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "cv2.csv", "--set", "cv.n_folds=2", "--set", "mtloc.epochs=1"]));
    assert_eq!(String::from_utf8(read(p.join("cv2.csv"))).unwrap().lines().count(), 1 + 4);
}

#[test]
fn rerun_reproduces_artifacts_and_detects_changed_inputs() {
    let dir = fixture();
    let p = dir.path();
    ok(p, &with_small(&["adapt", "mtloc-conf", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "m/c.bin"]));
    for rel in ["d/synth.manifest.toml", "m/src.bin.manifest.toml", "m/c.bin.manifest.toml"] {
        let stdout = ok(p, &["rerun", "--manifest", rel, "--out-dir", "again"]);
        assert!(!stdout.contains("DIFFERS"), "{stdout}");
        let recorded = manifest(p, rel);
        for out in recorded.outputs.keys() {
            let name = Path::new(out).file_name().unwrap();
            assert_eq!(read(p.join(out)), read(p.join("again").join(name)), "{out}");
        }
    }
    // a config file used originally is not needed: the manifest carries it
    let snapshot = manifest(p, "m/c.bin.manifest.toml").config;
    assert_eq!(snapshot.mtloc_conf.epochs, 1);

    std::fs::write(p.join("d/target_train.csv"), "changed").unwrap();
    let o = mtloc(p, &["rerun", "--manifest", "m/c.bin.manifest.toml", "--out-dir", "again"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
}

#[test]
fn show_config_prints_tuned_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["show-config", "--set", "mtloc.seed=3"]);
    let cfg: mtloc_cli::RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg.mtloc.seed, 3);
    assert_eq!(cfg.mtloc_conf.alpha, 0.8);
    assert_eq!(cfg.mtloc_conf.k, 2);
    assert_eq!((cfg.mtloc_conf.c_x, cfg.mtloc_conf.c_y), (8.0, 4.0));
    assert_eq!(cfg.mtloc.alpha, 0.7);
}
