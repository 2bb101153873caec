use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use serde_json::Value;

use cloplab_core::prototypes::{PrototypeMode, PrototypeSet};
use cloplab_core::toy::{ToyLoss, TrainConfig};

fn cloplab(args: &[&str]) -> Output {
    cloplab_env(args, None)
}

fn cloplab_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cloplab"));
    cmd.args(args).env_remove("CLOP_SEED");
    if let Some(s) = seed {
        cmd.env("CLOP_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn lr_range_examples() {
    let w = stdout_json(&cloplab(&["lr-range", "--tau", "0.1", "--sigma", "1", "--negatives", "49"]));
    assert!((w["eta_lo"].as_f64().unwrap() - 0.0244898).abs() < 1e-6);
    assert!((w["eta_hi"].as_f64().unwrap() - 0.0755102).abs() < 1e-6);
    assert_eq!(w["midpoint"].as_f64(), Some(0.05));
    let w = stdout_json(&cloplab(&["lr-range", "--tau", "0.2", "--sigma", "1", "--negatives", "49"]));
    assert_eq!(w["midpoint"].as_f64(), Some(0.1));
    assert_eq!(cloplab(&["lr-range", "--tau", "0.1", "--sigma", "0", "--negatives", "49"]).status.code(), Some(2));
    assert_eq!(cloplab(&["lr-range", "--tau", "-1", "--sigma", "1", "--negatives", "49"]).status.code(), Some(2));
}

#[test]
fn prototypes_examples() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ortho.json");
    let stats = stdout_json(&cloplab(&["prototypes", "--k", "100", "--dim", "128", "--mode", "orthonormal", "--seed", "1", "--out", p(&file)]));
    assert!(stats["max_offdiag_abs"].as_f64().unwrap() <= 1e-9);
    let loaded: PrototypeSet = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(loaded, PrototypeSet::generate(PrototypeMode::Orthonormal, 100, 128, 1).unwrap());

    let etf = dir.path().join("etf.json");
    let stats = stdout_json(&cloplab(&["prototypes", "--k", "3", "--dim", "8", "--mode", "etf", "--out", p(&etf)]));
    assert!((stats["min_offdiag"].as_f64().unwrap() + 0.5).abs() < 1e-12);
    assert!((stats["max_offdiag"].as_f64().unwrap() + 0.5).abs() < 1e-12);

    let bad = dir.path().join("bad.json");
    assert_eq!(cloplab(&["prototypes", "--k", "129", "--dim", "128", "--out", p(&bad)]).status.code(), Some(2));
    assert_eq!(cloplab(&["prototypes", "--k", "10", "--dim", "8", "--mode", "etf", "--out", p(&bad)]).status.code(), Some(2));
    assert_eq!(cloplab(&["prototypes", "--k", "3", "--dim", "8", "--mode", "simplex", "--out", p(&bad)]).status.code(), Some(2));
    assert!(!bad.exists());
}

#[test]
fn simulate_collapse_flag_follows_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--n", "50", "--dim", "50", "--tau", "0.1", "--steps", "1000", "--seed", "42"];
    let large = dir.path().join("large");
    let out = cloplab(&[&base[..], &["--lr", "1.0", "--out", p(&large)]].concat());
    assert!(out.status.success());
    assert_eq!(read_json(&large.join("summary.json"))["collapsed"], Value::Bool(true));
    let small = dir.path().join("small");
    assert!(cloplab(&[&base[..], &["--lr", "0.01", "--out", p(&small)]].concat()).status.success());
    let summary = read_json(&small.join("summary.json"));
    assert_eq!(summary["collapsed"], Value::Bool(false));
    assert_eq!(summary["config"]["seed"], 42);
}

#[test]
fn simulate_outputs_follow_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = cloplab(&["simulate", "--n", "6", "--dim", "4", "--steps", "25", "--record-every", "10", "--out", p(&run)]);
    assert!(out.status.success());
    let text = |name: &str| std::fs::read_to_string(run.join(name)).unwrap();
    let trajectory = text("trajectory.csv");
    let mut lines = trajectory.lines();
    assert_eq!(lines.next(), Some("step,loss,mean_norm,min_raw_norm,max_raw_norm,effective_rank"));
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "10", "20", "25"]);
    let spectra = text("spectra.csv");
    assert!(spectra.starts_with("step,index,singular_value\n"));
    assert_eq!(spectra.lines().count(), 1 + 4 * 4);
    let pca = text("pca.csv");
    assert!(pca.starts_with("step,point_id,pc1,pc2\n"));
    assert_eq!(pca.lines().count(), 1 + 4 * 6);
    let summary = read_json(&run.join("summary.json"));
    for key in ["config", "final", "collapsed"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    // every numeric field parses back exactly
    for line in spectra.lines().skip(1) {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(format!("{v:?}"), line.split(',').nth(2).unwrap());
    }
}

#[test]
fn simulate_config_errors_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let odd = dir.path().join("odd");
    assert_eq!(cloplab(&["simulate", "--n", "51", "--pair-mode", "paired", "--out", p(&odd)]).status.code(), Some(2));
    let runtime = cloplab(&["simulate", "--init-scale", "0", "--steps", "1", "--out", p(&dir.path().join("zero"))]);
    assert_eq!(runtime.status.code(), Some(1));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n_points": 8, "dim": 3, "steps": 5, "lr": 0.2, "bogus_key": 1}"#).unwrap();
    let out = cloplab(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    std::fs::write(&cfg, format!(r#"{{"n_points": 8, "dim": 3, "steps": 5, "lr": 0.2, "out": "{}"}}"#, p(&dir.path().join("from_file")))).unwrap();
    let echoed = stdout_json(&cloplab(&["simulate", "--config", p(&cfg), "--lr", "0.7", "--print-config"]));
    assert_eq!(echoed["lr"].as_f64(), Some(0.7));
    assert_eq!(echoed["n_points"], 8);
    assert!(cloplab(&["simulate", "--config", p(&cfg)]).status.success());
    assert!(dir.path().join("from_file/summary.json").exists());
    assert_eq!(cloplab(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));
    assert!(cloplab(&["simulate", "--config", p(&cfg), "--force"]).status.success());
}

#[test]
fn seed_environment_fallback() {
    let args = ["simulate", "--print-config"];
    assert_eq!(stdout_json(&cloplab_env(&args, Some("17")))["seed"], 17);
    assert_eq!(stdout_json(&cloplab_env(&[&args[..], &["--seed", "3"]].concat(), Some("17")))["seed"], 3);
    assert_eq!(stdout_json(&cloplab_env(&args, None))["seed"], 0);
    assert_eq!(cloplab_env(&args, Some("many")).status.code(), Some(2));
}

#[test]
fn train_toy_zero_lambda_matches_infonce() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("clop");
    let b = dir.path().join("infonce");
    let common = ["train-toy", "--seed", "5", "--epochs", "8", "--per-class", "20"];
    assert!(cloplab(&[&common[..], &["--loss", "clop", "--lambda", "0", "--out", p(&a)]].concat()).status.success());
    assert!(cloplab(&[&common[..], &["--loss", "infonce", "--out", p(&b)]].concat()).status.success());
    let metrics_a = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, std::fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&metrics_a).starts_with("epoch,loss,eff_rank,np_acc,probe_acc,mean_proto_cos\n"));
}

#[test]
fn train_toy_separable_mixture_is_classified() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    assert!(cloplab(&["train-toy", "--loss", "clop", "--lr", "0.05", "--out", p(&out)]).status.success());
    let report = read_json(&out.join("report.json"));
    let last = report["epochs"].as_array().unwrap().last().unwrap().clone();
    assert!(last["np_acc"].as_f64().unwrap() >= 0.9);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 201);
}

#[test]
fn train_toy_rejects_uncovered_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cloplab(&["train-toy", "--label-frac", "0.001", "--out", p(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("t/report.json").exists());
}

#[test]
fn verify_suites_pass() {
    for suite in ["gradients", "stationarity", "bound", "prototypes"] {
        let tally = stdout_json(&cloplab(&["verify", "--suite", suite]));
        assert_eq!(tally["failed"], 0, "{suite}");
        assert_eq!(tally["suite"], suite);
    }
    let bound = stdout_json(&cloplab(&["verify", "--suite", "bound"]));
    let rate = bound["details"]["satisfaction_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert!(bound["details"]["max_p_asymmetry"].as_f64().is_some());
    assert_eq!(cloplab(&["verify", "--suite", "everything"]).status.code(), Some(2));
}

#[test]
fn plot_kinds_and_schema_checks() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(cloplab(&["simulate", "--n", "10", "--dim", "5", "--steps", "30", "--out", p(&run)]).status.success());
    for (kind, csv) in [("spectrum", "spectra.csv"), ("trajectory", "trajectory.csv"), ("pca", "pca.csv")] {
        let a = dir.path().join(format!("{kind}_a.svg"));
        let b = dir.path().join(format!("{kind}_b.svg"));
        for svg in [&a, &b] {
            let out = cloplab(&["plot", "--in", p(&run.join(csv)), "--kind", kind, "--out", p(svg)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        let bytes = std::fs::read(&a).unwrap();
        assert!(bytes.starts_with(b"<svg"));
        assert_eq!(bytes, std::fs::read(&b).unwrap());
    }
    let header_only = dir.path().join("empty.csv");
    std::fs::write(&header_only, "step,index,singular_value\n").unwrap();
    let svg = dir.path().join("never.svg");
    assert_eq!(cloplab(&["plot", "--in", p(&header_only), "--kind", "spectrum", "--out", p(&svg)]).status.code(), Some(2));
    assert_eq!(cloplab(&["plot", "--in", p(&run.join("pca.csv")), "--kind", "trajectory", "--out", p(&svg)]).status.code(), Some(2));
    let garbled = dir.path().join("garbled.csv");
    std::fs::write(&garbled, "step,index,singular_value\n0,zero,1.0\n").unwrap();
    assert_eq!(cloplab(&["plot", "--in", p(&garbled), "--kind", "spectrum", "--out", p(&svg)]).status.code(), Some(2));
    assert!(!svg.exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(cloplab(&["collapse"]).status.code(), Some(2));
    assert_eq!(cloplab(&["simulate", "--steps", "many"]).status.code(), Some(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn train_config_round_trips_through_the_cli(
        lambda in 0.0f64..10.0,
        tau in 1e-3f64..2.0,
        lr in 0.0f64..5.0,
        jitter in 0.0f64..3.0,
        label_fraction in 0.0f64..=1.0,
        epochs in 0usize..500,
        seed in any::<u64>(),
        clop in any::<bool>(),
    ) {
        let cfg = TrainConfig {
            loss: if clop { ToyLoss::Clop } else { ToyLoss::Infonce },
            lambda,
            tau,
            lr,
            jitter_std: jitter,
            label_fraction,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let out = cloplab(&["train-toy", "--config", p(&path), "--print-config"]);
        prop_assert!(out.status.success());
        let echoed: TrainConfig = serde_json::from_slice(&out.stdout).unwrap();
        prop_assert_eq!(echoed, cfg);
    }
}
