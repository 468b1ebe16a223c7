//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! Failed criteria are listed in the summary; the process exits non-zero for
//! them only when `MTLOC_ACCEPTANCE_STRICT=1` is set.

#[path = "../../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::grad_trials::{dann_trial, describe, localizer_trial, run_trials, shot_trial};
use common::oracles::{brute_force_correct, ema_exactness, matched_statistics_losses, random_set, shot_ready_model};
use common::small_target;
use mtloc::data::{generate_synthetic, load_csv, split_train_test, ColumnMapping, Dataset};
use mtloc::eval::{aggregate_runs, compute_metrics, evaluate, heatmap, MetricsReport};
use mtloc::localizer::{train_source, Localizer, TrainConfig};
use mtloc::mtloc::{adapt, correct_labels, MTLocConfig};
use mtloc::shot::{run_shot, ShotConfig, ShotLosses};
use mtloc::nn::Rng;
use mtloc_cli::{RunConfig, RunManifest};

const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const ADAPTATION_BUDGET: Duration = Duration::from_secs(600);
const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    /// Advisory checks warn instead of failing the run.
    advisory: bool,
    detail: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, detail: Vec<String>) -> Self {
        Self { pass, advisory: false, detail }
    }
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, trial) in [
        ("localizer", localizer_trial as fn(u64) -> _),
        ("discriminator path", dann_trial),
        ("shot total", shot_trial),
    ] {
        let r = run_trials(trial);
        pass &= r.passed();
        detail.push(describe(name, &r));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < GRADIENT_BUDGET;
    detail.push(format!("runtime {:.1} s (limit {} s)", elapsed.as_secs_f64(), GRADIENT_BUDGET.as_secs()));
    Verdict::new(pass, detail)
}

fn mae_d(m: &Localizer, d: &Dataset) -> MetricsReport {
    evaluate(m, d).expect("labeled evaluation set")
}

fn adaptation_gain() -> Verdict {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let source = generate_synthetic(&cfg.synth_source).unwrap();
    let target = generate_synthetic(&cfg.synth_target).unwrap();
    let (s_train, s_test) = split_train_test(&source, cfg.split.ratio, cfg.split.seed).unwrap();
    let (t_train, t_test) = split_train_test(&target, cfg.split.ratio, cfg.split.seed).unwrap();
    let t_unlabeled = t_train.unlabeled();

    let (mut in_dom, mut src_only, mut plain, mut conf) = (vec![], vec![], vec![], vec![]);
    let mut detail = vec![format!(
        "{:>4} {:>10} {:>12} {:>8} {:>11}",
        "seed", "in-domain", "source-only", "mtloc", "mtloc-conf"
    )];
    for seed in 0..SEEDS {
        let (model, _) = train_source(&s_train, &TrainConfig { seed, ..cfg.train.clone() }).unwrap();
        in_dom.push(mae_d(&model, &s_test));
        src_only.push(mae_d(&model, &t_test));
        let a = adapt(&model, &t_unlabeled, &MTLocConfig { seed, ..cfg.mtloc.clone() }).unwrap();
        plain.push(mae_d(&a.student, &t_test));
        let c = adapt(&model, &t_unlabeled, &MTLocConfig { seed, ..cfg.mtloc_conf.clone() }).unwrap();
        conf.push(mae_d(&c.student, &t_test));
        let last = |v: &[MetricsReport]| v.last().unwrap().mean.mae_d;
        detail.push(format!(
            "{seed:>4} {:>10.3} {:>12.3} {:>8.3} {:>11.3}",
            last(&in_dom),
            last(&src_only),
            last(&plain),
            last(&conf)
        ));
    }
    let agg = |v: &[MetricsReport]| aggregate_runs(v).unwrap();
    let (i, s, p, c) = (agg(&in_dom), agg(&src_only), agg(&plain), agg(&conf));
    let elapsed = start.elapsed();

    let shift = s.mean.mae_d >= 3.0 * i.mean.mae_d;
    let reduction = 1.0 - p.mean.mae_d / s.mean.mae_d;
    let gain = reduction >= 0.30;
    let conf_mean = c.mean.mae_d <= p.mean.mae_d;
    let conf_std = c.std.mae_d < p.std.mae_d;
    let in_time = elapsed < ADAPTATION_BUDGET;
    let mark = |b: bool| if b { "ok" } else { "NOT MET" };
    detail.push(format!(
        "degradation {:.2}x ({:.3} -> {:.3} m), need >= 3x: {}",
        s.mean.mae_d / i.mean.mae_d,
        i.mean.mae_d,
        s.mean.mae_d,
        mark(shift)
    ));
    detail.push(format!("mtloc reduction {:.1}%, need >= 30%: {}", 100.0 * reduction, mark(gain)));
    detail.push(format!(
        "mtloc-conf mean {:.3} vs mtloc {:.3}, need <=: {}",
        c.mean.mae_d,
        p.mean.mae_d,
        mark(conf_mean)
    ));
    detail.push(format!(
        "mtloc-conf std {:.3} vs mtloc {:.3}, need strictly smaller: {}",
        c.std.mae_d,
        p.std.mae_d,
        mark(conf_std)
    ));
    detail.push(format!("runtime {:.1} s (limit {} s)", elapsed.as_secs_f64(), ADAPTATION_BUDGET.as_secs()));
    Verdict::new(shift && gain && conf_mean && conf_std && in_time, detail)
}

fn knn_oracle() -> Verdict {
    let mut mismatches = 0;
    let mut checked = 0;
    for seed in 0..3 {
        let (pls, x) = random_set(100, seed);
        for k in 1..=3 {
            let got = correct_labels(&pls, &x, k).unwrap();
            let want = brute_force_correct(&pls, &x, k);
            for (g, w) in got.entries.iter().zip(&want) {
                checked += 1;
                if g.label[0].to_bits() != w[0].to_bits() || g.label[1].to_bits() != w[1].to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    Verdict::new(
        mismatches == 0,
        vec![format!("{checked} labels over 3 seeds x k in 1..=3 on 100 samples, {mismatches} not bit-equal")],
    )
}

fn ema_exact() -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for alpha in [0.7, 0.8, 1.0] {
        let (batches, ulps) = ema_exactness(alpha);
        pass &= batches == 10 && ulps == 0;
        detail.push(format!("alpha {alpha}: {batches} batches, max deviation {ulps} ulp"));
    }
    Verdict::new(pass, detail)
}

fn metric_hand_checks() -> Verdict {
    let r = compute_metrics(&[[3.0, 4.0], [0.0, 0.0]], &[[0.0, 0.0], [0.0, 0.0]]).unwrap().mean;
    let exact = r.mae_x == 1.5 && r.mae_y == 2.0 && r.mae_d == 2.5 && r.rmse_d == 12.5f64.sqrt();
    let mut rng = Rng::new(17);
    let labels: Vec<[f64; 2]> = (0..500).map(|_| [10.0 * rng.uniform(), 10.0 * rng.uniform()]).collect();
    let preds: Vec<[f64; 2]> = labels
        .iter()
        .map(|l| [l[0] + 2.0 * rng.standard_normal(), l[1] + 2.0 * rng.standard_normal()])
        .collect();
    let mae = compute_metrics(&preds, &labels).unwrap().mean.mae_d;
    let g = heatmap(&preds, &labels, 1.0, None).unwrap();
    let gap = (g.weighted_mean() - mae).abs();
    Verdict::new(
        exact && gap < 1e-9,
        vec![
            format!(
                "fixture: mae_x {} mae_y {} mae_d {} rmse_d {} (exact: {exact})",
                r.mae_x, r.mae_y, r.mae_d, r.rmse_d
            ),
            format!("heatmap weighted mean vs mae_d: |gap| {gap:.2e} (limit 1e-9)"),
        ],
    )
}

fn shot_contracts() -> Verdict {
    let m = shot_ready_model(40, 1);
    let target = small_target(48);
    let quick = ShotConfig { epochs: 2, batch_size: 16, ..Default::default() };
    let (out, _) = run_shot(&m, &target, &quick).unwrap();
    let frozen = out.regressor().params().fingerprint() == m.regressor().params().fingerprint();
    let zero = matched_statistics_losses();
    let vanish = zero == ShotLosses::default();
    let off = ShotConfig { lambda_cons: 0.0, lambda_teach: 0.0, lambda_stat: 0.0, lambda_coral: 0.0, ..quick };
    let (same, _) = run_shot(&m, &target, &off).unwrap();
    let identical = same.extractor() == m.extractor() && same.regressor() == m.regressor();
    Verdict::new(
        frozen && vanish && identical,
        vec![
            format!("regressor hash unchanged after adaptation: {frozen}"),
            format!(
                "matched-statistics terms cons {} teach {} stat {} coral {}",
                zero.cons, zero.teach, zero.stat, zero.coral
            ),
            format!("all weights zero leaves the model bit-identical: {identical}"),
        ],
    )
}

/// Optional real-data check; `MTLOC_INLAN_DIR` must hold `ceiling.csv` and
/// `cross.csv` (and optionally `mapping.toml`).
fn inlan_advisory() -> Verdict {
    let advisory = |pass, detail| Verdict { pass, advisory: true, detail };
    let Some(dir) = std::env::var_os("MTLOC_INLAN_DIR") else {
        return advisory(true, vec!["skipped: MTLOC_INLAN_DIR not set, INLAN CSVs not supplied".into()]);
    };
    let dir = Path::new(&dir);
    let (ceiling, cross) = (dir.join("ceiling.csv"), dir.join("cross.csv"));
    if !ceiling.exists() || !cross.exists() {
        return advisory(true, vec![format!("skipped: ceiling.csv / cross.csv missing in {}", dir.display())]);
    }
    let mapping = match std::fs::read_to_string(dir.join("mapping.toml")) {
        Ok(t) => ColumnMapping::from_toml_str(&t).unwrap(),
        Err(_) => ColumnMapping::default(),
    };
    let cfg = RunConfig::default();
    let source = load_csv(&ceiling, &mapping).unwrap();
    let target = load_csv(&cross, &mapping).unwrap();
    let (s_train, _) = split_train_test(&source, cfg.split.ratio, cfg.split.seed).unwrap();
    let (t_train, t_test) = split_train_test(&target, cfg.split.ratio, cfg.split.seed).unwrap();
    let (model, _) = train_source(&s_train, &cfg.train).unwrap();
    let before = mae_d(&model, &t_test).mean.mae_d;
    let conf = adapt(&model, &t_train.unlabeled(), &cfg.mtloc_conf).unwrap();
    let after = mae_d(&conf.student, &t_test).mean.mae_d;
    let ok = after <= 6.5 && after <= 0.25 * before;
    advisory(
        ok,
        vec![format!(
            "Cross MAE(d): source-only {before:.2} m, mtloc-conf {after:.2} m (target <= 6.5 m and >= 75% reduction)"
        )],
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mtloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn cli_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let small = [
        "--set", "synth_source.sample_interval=1.0", "--set", "synth_target.sample_interval=1.0",
        "--set", "train.epochs=5", "--set", "mtloc_conf.epochs=2", "--set", "shot.epochs=2",
        "--set", "dann.epochs=2", "--set", "oracle.epochs=2",
    ];
    let steps: Vec<(Vec<&str>, &str)> = vec![
        (vec!["gen-synth", "--out-dir", "d"], "d/synth.manifest.toml"),
        (vec!["train", "--source-csv", "d/source_train.csv", "--out", "m/src.bin"], "m/src.bin.manifest.toml"),
        (
            vec!["adapt", "mtloc-conf", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "m/conf.bin"],
            "m/conf.bin.manifest.toml",
        ),
        (
            vec!["adapt", "shot", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "m/shot.bin"],
            "m/shot.bin.manifest.toml",
        ),
        (
            vec![
                "adapt", "dann", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--source-csv",
                "d/source_train.csv", "--out", "m/dann.bin",
            ],
            "m/dann.bin.manifest.toml",
        ),
        (
            vec!["adapt", "oracle", "--model", "m/src.bin", "--target-csv", "d/target_train.csv", "--out", "m/oracle.bin"],
            "m/oracle.bin.manifest.toml",
        ),
        (
            vec!["eval", "--model", "m/src.bin", "--model", "m/conf.bin", "--csv", "d/target_test.csv", "--out", "r/eval.csv"],
            "r/eval.csv.manifest.toml",
        ),
        (
            vec!["heatmap", "--model", "m/conf.bin", "--csv", "d/target_test.csv", "--out-stem", "r/heat"],
            "r/heat.manifest.toml",
        ),
    ];
    let mut detail = Vec::new();
    let mut pass = true;
    for (args, manifest) in &steps {
        let mut full = args.clone();
        if args[0] != "eval" && args[0] != "heatmap" {
            full.extend(small);
        }
        if let Err(e) = run_cli(p, &full) {
            return Verdict::new(false, vec![e]);
        }
        let rerun_dir = format!("rerun/{}", args[0]);
        if let Err(e) = run_cli(p, &["rerun", "--manifest", manifest, "--out-dir", &rerun_dir]) {
            return Verdict::new(false, vec![e]);
        }
        let recorded = RunManifest::read(&p.join(manifest)).unwrap();
        let mut same = 0;
        for out in recorded.outputs.keys() {
            let name = Path::new(out).file_name().unwrap();
            let a = std::fs::read(p.join(out)).unwrap();
            let b = std::fs::read(p.join(&rerun_dir).join(name)).unwrap();
            if a == b {
                same += 1;
            } else {
                pass = false;
                detail.push(format!("{out} differs after rerun"));
            }
        }
        detail.push(format!("{:<9} {same}/{} artifacts byte-identical", args[0], recorded.outputs.len()));
    }
    Verdict::new(pass, detail)
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("synthetic adaptation gain", adaptation_gain),
        ("confidence correction oracle", knn_oracle),
        ("EMA exactness", ema_exact),
        ("metric hand-checks", metric_hand_checks),
        ("SHOT contracts", shot_contracts),
        ("INLAN reproduction (advisory)", inlan_advisory),
        ("CLI rerun determinism", cli_determinism),
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = match std::panic::catch_unwind(check) {
            Ok(v) => v,
            Err(_) => Verdict::new(false, vec!["panicked".into()]),
        };
        let status = match (v.pass, v.advisory) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        let line = format!("[{status}] {} {name} ({:.1} s)", i + 1, start.elapsed().as_secs_f64());
        println!("{line}");
        for d in &v.detail {
            println!("         {d}");
        }
        if !v.pass && !v.advisory {
            failed.push(i + 1);
        }
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failed.is_empty() {
        println!("all required criteria passed");
        return;
    }
    println!("required criteria not met: {failed:?}");
    if std::env::var("MTLOC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
