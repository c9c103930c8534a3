//! End-to-end runs through the on-disk harness.

use std::fs;
use std::path::{Path, PathBuf};

use gapg_core::domain::write_dataset;
use gapg_core::harness::{
    self, execute, report, run_to, write_report, Algorithm, RunConfig, RunSummary, METRICS_SCHEMA,
};
use gapg_core::tasks::{generate, TaskGenConfig};
use gapg_core::Error;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn write_default_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("two_tier.jsonl");
    write_dataset(&path, &generate(&TaskGenConfig::two_tier_default()).unwrap()).unwrap();
    path
}

#[test]
fn shipped_configs_match_presets() {
    let configs = repo_root().join("configs");
    for algorithm in [
        Algorithm::Gapg,
        Algorithm::Grpo,
        Algorithm::GrpoCollab,
        Algorithm::Router,
        Algorithm::Naive,
    ] {
        let mut cfg = RunConfig::load(&configs.join(format!("{}.toml", algorithm.name()))).unwrap();
        assert_eq!(cfg.dataset, configs.join("../data/two_tier.jsonl"));
        cfg.dataset = Default::default();
        assert_eq!(cfg, RunConfig::preset(algorithm), "{}", algorithm.name());
    }
    let tasks = TaskGenConfig::load(&configs.join("tasks.toml")).unwrap();
    assert_eq!(tasks, TaskGenConfig::two_tier_default());
    for sweep in ["gapg-sweep", "naive-sweep"] {
        let cfg = RunConfig::load(&configs.join(format!("{sweep}.toml"))).unwrap();
        assert_eq!(cfg.ratio_sweep, vec![0.2, 0.3, 0.4, 0.6]);
    }
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Algorithm::Router);
    cfg.dataset = write_default_dataset(dir.path());
    cfg.trainer.total_steps = 60;
    cfg.checkpoint_every = 25;
    cfg.ratio_sweep = vec![0.2, 0.4];
    let out = dir.path().join("router");
    run_to(&cfg, &out).unwrap();
    for name in [
        "metrics.csv",
        "checkpoint-000025.ckpt",
        "checkpoint-000050.ckpt",
        "final.ckpt",
        "router.json",
        "sweep.csv",
        "summary.json",
        "config.toml",
        "run_info.json",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_SCHEMA));
    assert_eq!(metrics.lines().count(), 2 + 60);
    let saved = RunConfig::from_toml_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn output_root_override_applies_to_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Algorithm::Naive);
    cfg.dataset = write_default_dataset(dir.path());
    cfg.trainer.total_steps = 5;
    cfg.out_dir = PathBuf::from("runs/naive");
    std::env::set_var(harness::OUT_ROOT_ENV, dir.path());
    let (out, _) = harness::run(&cfg).unwrap();
    std::env::remove_var(harness::OUT_ROOT_ENV);
    assert_eq!(out, dir.path().join("runs/naive"));
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn report_separates_gapg_from_collapsed_grpo() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_default_dataset(dir.path());
    let mut dirs = Vec::new();
    for algorithm in [Algorithm::Gapg, Algorithm::GrpoCollab] {
        let mut cfg = RunConfig::preset(algorithm);
        cfg.dataset = data.clone();
        let out = dir.path().join(algorithm.name());
        run_to(&cfg, &out).unwrap();
        dirs.push(out);
    }
    let rep = report(&dirs).unwrap();
    let table: Vec<&str> = rep.markdown.lines().skip(2).collect();
    assert_eq!(table.len(), 2);
    assert!(rep
        .long
        .iter()
        .any(|r| r.run == "gapg" && r.metric == "eval_collaborative_accuracy"));

    let summary = |name: &str| -> RunSummary {
        serde_json::from_str(&fs::read_to_string(dir.path().join(name).join("summary.json")).unwrap()).unwrap()
    };
    let rho = RunConfig::preset(Algorithm::Gapg).trainer.rho;
    assert!(summary("gapg").trailing_call_ratio_50.unwrap() <= rho / (1.0 + rho) + 0.05);
    assert!(summary("grpo-collab").trailing_call_ratio_50.unwrap() >= 0.9);

    write_report(&rep, &dir.path().join("report")).unwrap();
    let csv = fs::read_to_string(dir.path().join("report/report.csv")).unwrap();
    assert!(csv.starts_with("run,iteration,metric,value"));
}

#[test]
fn report_names_the_run_missing_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("half-done");
    fs::create_dir_all(&run).unwrap();
    match report(&[run]) {
        Err(Error::MissingMetrics { run, .. }) => assert_eq!(run, "half-done"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(report(&[]), Err(Error::NoRuns)));
}

#[test]
fn naive_sweep_is_monotone_in_the_cap() {
    let dataset = generate(&TaskGenConfig::two_tier_default()).unwrap();
    let mut cfg = RunConfig::preset(Algorithm::Naive);
    cfg.ratio_sweep = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8];
    let out = execute(&cfg, &dataset).unwrap();
    let acc: Vec<f64> = out.summary.sweep.iter().map(|r| r.collaborative_accuracy).collect();
    assert!(acc.windows(2).all(|w| w[0] <= w[1]), "{acc:?}");
    assert_eq!(acc[0], out.summary.sweep[0].device_accuracy);
}

#[test]
fn ordering_holds_on_other_dataset_seeds() {
    for seed in [7, 99] {
        let dataset = generate(&TaskGenConfig {
            seed,
            ..TaskGenConfig::two_tier_default()
        })
        .unwrap();
        let acc = |algorithm| {
            execute(&RunConfig::preset(algorithm), &dataset)
                .unwrap()
                .summary
                .final_eval
                .collaborative_accuracy
        };
        let gapg = acc(Algorithm::Gapg);
        let naive = acc(Algorithm::Naive);
        let collab = acc(Algorithm::GrpoCollab);
        let device = acc(Algorithm::Grpo);
        assert!(gapg > naive && gapg > collab, "seed {seed}: {gapg} {naive} {collab}");
        assert!(
            naive > device && collab > device,
            "seed {seed}: {naive} {collab} {device}"
        );
    }
}
