//! Experiment orchestration: run configs, seeded end-to-end runs, metrics
//! persistence and cross-run reports.
//!
//! Every file a run writes is a pure function of the dataset, the config and
//! the seeds, except `run_info.json`, which carries the wall-clock timestamp.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    grpo_train_observed, route_and_eval, train_router, EvalMode, EvalReport, GrpoConfig, GrpoMode, LogisticConfig,
    RouterFit,
};
use crate::domain::{read_dataset, validate_dataset, IterationRecord, Prompt, RewardParams, RunMetrics, TrainerConfig};
use crate::error::{from_toml, Error, Result};
use crate::gapg;
use crate::policy::{PolicyKind, PolicyParams};
use crate::rng::{self, Purpose};

/// First line of every metrics file; bump when columns change.
pub const METRICS_SCHEMA: &str = "# metrics-schema: 1";
/// When set, relative output directories are resolved against this root.
pub const OUT_ROOT_ENV: &str = "GAPG_LAB_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gapg,
    /// GRPO with the help action masked out, evaluated device-only.
    Grpo,
    GrpoCollab,
    /// Task-only GRPO plus a logistic router.
    Router,
    /// Task-only GRPO plus uniformly random offloading.
    Naive,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gapg => "gapg",
            Algorithm::Grpo => "grpo",
            Algorithm::GrpoCollab => "grpo-collab",
            Algorithm::Router => "router",
            Algorithm::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gapg" => Algorithm::Gapg,
            "grpo" => Algorithm::Grpo,
            "grpo-collab" => Algorithm::GrpoCollab,
            "router" => Algorithm::Router,
            "naive" => Algorithm::Naive,
            other => return Err(Error::config("algorithm", format!("unknown algorithm `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSettings {
    /// Device-only samples per prompt used to label it.
    pub n_samples: usize,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for RouterSettings {
    fn default() -> Self {
        let l = LogisticConfig::default();
        RouterSettings {
            n_samples: 8,
            learning_rate: l.learning_rate,
            max_iters: l.max_iters,
            tolerance: l.tolerance,
        }
    }
}

impl RouterSettings {
    pub fn logistic(&self) -> LogisticConfig {
        LogisticConfig {
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// JSONL dataset; relative paths are resolved against the config file.
    pub dataset: PathBuf,
    pub algorithm: Algorithm,
    pub policy: PolicyKind,
    pub trainer: TrainerConfig,
    pub reward: RewardParams,
    pub grpo: GrpoConfig,
    pub router: RouterSettings,
    /// Greedy held-out evaluation every this many iterations.
    pub eval_cadence: usize,
    /// Fraction of the dataset held out for evaluation.
    pub eval_fraction: f64,
    pub split_seed: u64,
    /// Cloud-call cap applied during evaluation.
    pub eval_cap: f64,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    /// Extra evaluation caps. For gapg each cap gets its own training run
    /// with `rho = cap / (1 - cap)`.
    pub ratio_sweep: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            algorithm: Algorithm::Gapg,
            policy: PolicyKind::LinearSoftmax,
            trainer: TrainerConfig::default(),
            reward: RewardParams::default(),
            grpo: GrpoConfig::default(),
            router: RouterSettings::default(),
            eval_cadence: 25,
            eval_fraction: 0.2,
            split_seed: 0,
            eval_cap: 0.3,
            checkpoint_every: 100,
            out_dir: PathBuf::from("runs/default"),
            ratio_sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for `algorithm`, matching the shipped configs.
    /// GAPG's unnormalised estimator takes a larger step than GRPO's
    /// z-scored one.
    pub fn preset(algorithm: Algorithm) -> Self {
        let mut cfg = RunConfig {
            algorithm,
            out_dir: PathBuf::from("runs").join(algorithm.name()),
            ..RunConfig::default()
        };
        cfg.trainer.learning_rate = match algorithm {
            Algorithm::Gapg => 3.0,
            _ => 1.0,
        };
        cfg
    }

    /// Parses TOML; errors name the offending field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        from_toml(text, "run config")
    }

    /// Loads a config file, resolving a relative dataset path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        if cfg.dataset.is_relative() && !cfg.dataset.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("run config", e.to_string()))
    }

    /// Checks everything except the dataset file.
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.grpo.validate()?;
        if self.eval_cadence == 0 {
            return Err(Error::config("eval_cadence", "must be >= 1"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config("eval_fraction", "must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.eval_cap) {
            return Err(Error::config("eval_cap", "must be in [0, 1]"));
        }
        for (i, &cap) in self.ratio_sweep.iter().enumerate() {
            if !(0.0..1.0).contains(&cap) {
                return Err(Error::config(format!("ratio_sweep[{i}]"), "caps must be in [0, 1)"));
            }
        }
        if self.router.n_samples < 2 {
            return Err(Error::config("router.n_samples", "must be >= 2"));
        }
        let l = self.router.logistic();
        if !(l.learning_rate.is_finite() && l.learning_rate > 0.0) {
            return Err(Error::config("router.learning_rate", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Checks the config and that the dataset file exists.
    pub fn validate_with_dataset(&self) -> Result<()> {
        self.validate()?;
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::config("dataset", "is required"));
        }
        if !self.dataset.is_file() {
            return Err(Error::config(
                "dataset",
                format!("file `{}` does not exist", self.dataset.display()),
            ));
        }
        Ok(())
    }
}

/// Applies the output-root override to relative directories.
pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Seeded train/eval split; both halves keep dataset order.
pub fn split_dataset(dataset: &[Prompt], eval_fraction: f64, seed: u64) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    if dataset.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let n_eval = ((dataset.len() as f64 * eval_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));
    let mut is_eval = vec![false; dataset.len()];
    for &i in &order[..n_eval] {
        is_eval[i] = true;
    }
    let (eval, train): (Vec<_>, Vec<_>) = dataset.iter().cloned().enumerate().partition(|(i, _)| is_eval[*i]);
    Ok((
        train.into_iter().map(|(_, p)| p).collect(),
        eval.into_iter().map(|(_, p)| p).collect(),
    ))
}

/// One metrics.csv row. Evaluation columns are empty between evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub call_ratio: f64,
    pub device_accuracy: f64,
    pub collaborative_accuracy: f64,
    pub d1: usize,
    pub d2: usize,
    pub eligible_d2: usize,
    pub cloud_queries: usize,
    pub skipped_update: bool,
    pub eval_device_accuracy: Option<f64>,
    pub eval_collaborative_accuracy: Option<f64>,
    pub eval_help_fraction: Option<f64>,
    pub eval_cloud_call_ratio: Option<f64>,
}

impl MetricsRow {
    fn new(r: &IterationRecord, eval: Option<&EvalReport>) -> Self {
        MetricsRow {
            iteration: r.iteration,
            mean_reward: r.mean_reward,
            call_ratio: r.call_ratio,
            device_accuracy: r.device_accuracy,
            collaborative_accuracy: r.collaborative_accuracy,
            d1: r.d1,
            d2: r.d2,
            eligible_d2: r.eligible_d2,
            cloud_queries: r.cloud_queries,
            skipped_update: r.skipped_update,
            eval_device_accuracy: eval.map(|e| e.device_accuracy),
            eval_collaborative_accuracy: eval.map(|e| e.collaborative_accuracy),
            eval_help_fraction: eval.map(|e| e.help_request_ratio),
            eval_cloud_call_ratio: eval.map(|e| e.cloud_call_ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cap: f64,
    /// Budget used for training at this cap (gapg only).
    pub train_rho: Option<f64>,
    pub device_accuracy: f64,
    pub collaborative_accuracy: f64,
    pub cloud_call_ratio: f64,
    pub help_request_ratio: f64,
}

impl SweepRow {
    fn new(cap: f64, train_rho: Option<f64>, r: &EvalReport) -> Self {
        SweepRow {
            cap,
            train_rho,
            device_accuracy: r.device_accuracy,
            collaborative_accuracy: r.collaborative_accuracy,
            cloud_call_ratio: r.cloud_call_ratio,
            help_request_ratio: r.help_request_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub policy: PolicyKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub iterations: usize,
    pub final_eval: EvalReport,
    /// Greedy help-call fraction of the final policy on the training split.
    pub train_help_fraction: f64,
    /// Mean sampled call ratio over the last 50 / 100 iterations.
    pub trailing_call_ratio_50: Option<f64>,
    pub trailing_call_ratio_100: Option<f64>,
    /// Iterations where `|D2| > floor(rho |D1|)`.
    pub budget_violations: usize,
    pub skipped_updates: usize,
    pub router_train_accuracy: Option<f64>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics: RunMetrics,
    pub final_params: PolicyParams,
    pub checkpoints: Vec<(usize, PolicyParams)>,
    pub router: Option<RouterFit>,
    pub summary: RunSummary,
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.trainer.seed ^ cfg.split_seed.rotate_left(32)
}

/// Greedy evaluation under `cap` in the routing mode that goes with `algorithm`.
pub fn evaluate(
    cfg: &RunConfig,
    params: &PolicyParams,
    train: &[Prompt],
    eval: &[Prompt],
    cap: f64,
    router: Option<&RouterFit>,
) -> Result<(EvalReport, Option<RouterFit>)> {
    let seed = eval_seed(cfg);
    match cfg.algorithm {
        Algorithm::Gapg | Algorithm::GrpoCollab => {
            Ok((route_and_eval(params, EvalMode::PolicyRouted, eval, cap, seed)?, None))
        }
        Algorithm::Grpo => Ok((route_and_eval(params, EvalMode::Device, eval, cap, seed)?, None)),
        Algorithm::Naive => Ok((route_and_eval(params, EvalMode::Naive, eval, cap, seed)?, None)),
        Algorithm::Router => {
            let fit = match router {
                Some(f) => f.clone(),
                None => train_router(
                    train,
                    params,
                    cfg.router.n_samples,
                    cfg.trainer.seed,
                    &cfg.router.logistic(),
                )?,
            };
            let report = route_and_eval(params, EvalMode::Router(&fit.params), eval, cap, seed)?;
            Ok((report, Some(fit)))
        }
    }
}

fn train_with<F>(
    cfg: &RunConfig,
    trainer: &TrainerConfig,
    full: &[Prompt],
    train: &[Prompt],
    observer: F,
) -> Result<(PolicyParams, RunMetrics)>
where
    F: FnMut(&IterationRecord, &PolicyParams) -> Result<()>,
{
    let params = PolicyParams::for_dataset(cfg.policy, full)?;
    match cfg.algorithm {
        Algorithm::Gapg => gapg::train_observed(params, train, trainer, &cfg.reward, observer),
        Algorithm::GrpoCollab => grpo_train_observed(
            params,
            train,
            trainer,
            &cfg.grpo,
            GrpoMode::Collaborative,
            &cfg.reward,
            observer,
        ),
        Algorithm::Grpo | Algorithm::Router | Algorithm::Naive => grpo_train_observed(
            params,
            train,
            trainer,
            &cfg.grpo,
            GrpoMode::TaskOnly,
            &cfg.reward,
            observer,
        ),
    }
}

fn greedy_help_fraction(params: &PolicyParams, prompts: &[Prompt]) -> Result<f64> {
    let mut helps = 0usize;
    for p in prompts {
        let a = params.greedy(p, crate::policy::ActionMask::All)?;
        if Some(a) == p.help_index() {
            helps += 1;
        }
    }
    Ok(helps as f64 / prompts.len() as f64)
}

/// Trains, evaluates and summarises one run entirely in memory.
pub fn execute(cfg: &RunConfig, dataset: &[Prompt]) -> Result<RunOutput> {
    cfg.validate()?;
    let report = validate_dataset(dataset)?;
    if let Some(v) = report.violations.first() {
        return Err(Error::config(
            "dataset",
            format!(
                "{} invalid prompts (first: prompt {}: {})",
                report.violations.len(),
                v.prompt_id,
                v.kind
            ),
        ));
    }
    let (train, eval) = split_dataset(dataset, cfg.eval_fraction, cfg.split_seed)?;

    let steps = cfg.trainer.total_steps;
    let mut rows = Vec::with_capacity(steps);
    let mut checkpoints = Vec::new();
    let (final_params, metrics) = train_with(cfg, &cfg.trainer, dataset, &train, |record, params| {
        let it = record.iteration;
        let report = if it % cfg.eval_cadence == 0 || it == steps {
            Some(evaluate(cfg, params, &train, &eval, cfg.eval_cap, None)?.0)
        } else {
            None
        };
        rows.push(MetricsRow::new(record, report.as_ref()));
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            checkpoints.push((it, params.clone()));
        }
        Ok(())
    })?;

    let (final_eval, router) = evaluate(cfg, &final_params, &train, &eval, cfg.eval_cap, None)?;

    let mut sweep = Vec::with_capacity(cfg.ratio_sweep.len());
    for &cap in &cfg.ratio_sweep {
        if cfg.algorithm == Algorithm::Gapg {
            let rho = cap / (1.0 - cap);
            let trainer = TrainerConfig {
                rho,
                ..cfg.trainer.clone()
            };
            let (params, _) = train_with(cfg, &trainer, dataset, &train, |_, _| Ok(()))?;
            let (r, _) = evaluate(cfg, &params, &train, &eval, cap, None)?;
            sweep.push(SweepRow::new(cap, Some(rho), &r));
        } else {
            let (r, _) = evaluate(cfg, &final_params, &train, &eval, cap, router.as_ref())?;
            sweep.push(SweepRow::new(cap, None, &r));
        }
    }

    let rho = cfg.trainer.rho;
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        policy: cfg.policy,
        n_train: train.len(),
        n_eval: eval.len(),
        iterations: steps,
        train_help_fraction: greedy_help_fraction(&final_params, &train)?,
        trailing_call_ratio_50: metrics.trailing_call_ratio(50),
        trailing_call_ratio_100: metrics.trailing_call_ratio(100),
        budget_violations: metrics
            .records
            .iter()
            .filter(|r| r.d2 > gapg::budget_cap(rho, r.d1))
            .count(),
        skipped_updates: metrics.records.iter().filter(|r| r.skipped_update).count(),
        router_train_accuracy: router.as_ref().map(|f| f.train_accuracy),
        final_eval,
        sweep,
    };
    Ok(RunOutput {
        rows,
        metrics,
        final_params,
        checkpoints,
        router,
        summary,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{METRICS_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        // header only
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const METRICS_COLUMNS: [&str; 14] = [
    "iteration",
    "mean_reward",
    "call_ratio",
    "device_accuracy",
    "collaborative_accuracy",
    "d1",
    "d2",
    "eligible_d2",
    "cloud_queries",
    "skipped_update",
    "eval_device_accuracy",
    "eval_collaborative_accuracy",
    "eval_help_fraction",
    "eval_cloud_call_ratio",
];

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.splitn(2, '\n');
    let schema = lines.next().unwrap_or_default().trim_end();
    if schema != METRICS_SCHEMA {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected `{METRICS_SCHEMA}`, found `{schema}`"),
        ));
    }
    let body = lines.next().unwrap_or_default();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    finished_unix_seconds: u64,
    algorithm: &'a str,
    dataset: String,
}

/// Executes `cfg` and writes its artifacts to `out_dir`:
/// `metrics.csv`, `checkpoint-<iter>.ckpt`, `final.ckpt`, `summary.json`,
/// `config.toml`, `router.json` (router runs), `sweep.csv` (sweeps) and the
/// `run_info.json` timestamp sidecar.
pub fn run_to(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate_with_dataset()?;
    let dataset = read_dataset(&cfg.dataset)?;
    let out = execute(cfg, &dataset)?;
    fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &out.rows)?;
    for (it, params) in &out.checkpoints {
        params.save(&out_dir.join(format!("checkpoint-{it:06}.ckpt")))?;
    }
    out.final_params.save(&out_dir.join("final.ckpt"))?;
    if let Some(fit) = &out.router {
        write_json(&out_dir.join("router.json"), fit)?;
    }
    if !out.summary.sweep.is_empty() {
        write_sweep_csv(&out_dir.join("sweep.csv"), &out.summary.sweep)?;
    }
    write_json(&out_dir.join("summary.json"), &out.summary)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let finished = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &out_dir.join("run_info.json"),
        &RunInfo {
            finished_unix_seconds: finished,
            algorithm: cfg.algorithm.name(),
            dataset: cfg.dataset.display().to_string(),
        },
    )?;
    log::info!(
        "{} run finished: collaborative accuracy {:.4}, help fraction {:.4}",
        cfg.algorithm.name(),
        out.summary.final_eval.collaborative_accuracy,
        out.summary.final_eval.help_request_ratio
    );
    Ok(out.summary)
}

/// `run_to` with the configured output directory (after the root override).
pub fn run(cfg: &RunConfig) -> Result<(PathBuf, RunSummary)> {
    let dir = resolve_out_dir(&cfg.out_dir);
    let summary = run_to(cfg, &dir)?;
    Ok((dir, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub run: String,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub long: Vec<LongRow>,
    pub markdown: String,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn long_rows(run: &str, rows: &[MetricsRow]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for r in rows {
        let mut push = |metric: &str, value: f64| {
            out.push(LongRow {
                run: run.to_string(),
                iteration: r.iteration,
                metric: metric.to_string(),
                value,
            })
        };
        push("mean_reward", r.mean_reward);
        push("call_ratio", r.call_ratio);
        push("device_accuracy", r.device_accuracy);
        push("collaborative_accuracy", r.collaborative_accuracy);
        push("d1", r.d1 as f64);
        push("d2", r.d2 as f64);
        push("eligible_d2", r.eligible_d2 as f64);
        push("cloud_queries", r.cloud_queries as f64);
        push("skipped_update", f64::from(u8::from(r.skipped_update)));
        let evals = [
            ("eval_device_accuracy", r.eval_device_accuracy),
            ("eval_collaborative_accuracy", r.eval_collaborative_accuracy),
            ("eval_help_fraction", r.eval_help_fraction),
            ("eval_cloud_call_ratio", r.eval_cloud_call_ratio),
        ];
        for (name, v) in evals {
            if let Some(v) = v {
                push(name, v);
            }
        }
    }
    out
}

/// Merges finished runs into a long-format table and a markdown summary.
pub fn report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::NoRuns);
    }
    let mut long = Vec::new();
    let mut summaries = BTreeMap::new();
    for dir in run_dirs {
        let name = run_name(dir);
        let metrics = dir.join("metrics.csv");
        if !metrics.is_file() {
            return Err(Error::MissingMetrics {
                run: name,
                path: metrics,
            });
        }
        long.extend(long_rows(&name, &read_metrics_csv(&metrics)?));
        let summary_path = dir.join("summary.json");
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(&summary_path).map_err(|_| Error::MissingMetrics {
                run: name.clone(),
                path: summary_path.clone(),
            })?)?;
        summaries.insert(name, summary);
    }
    let mut md = String::from(
        "| run | algorithm | device acc | collaborative acc | cloud calls | help fraction | trailing call ratio |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for (name, s) in &summaries {
        let e = &s.final_eval;
        md.push_str(&format!(
            "| {name} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
            s.algorithm.name(),
            e.device_accuracy,
            e.collaborative_accuracy,
            e.cloud_call_ratio,
            e.help_request_ratio,
            s.trailing_call_ratio_50
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
        ));
    }
    Ok(Report { long, markdown: md })
}

/// Writes `report.csv` and `report.md` into `out_dir`.
pub fn write_report(report: &Report, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("report.csv"))?;
    for r in &report.long {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(out_dir.join("report.md"), &report.markdown)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate, TaskGenConfig};

    fn small_dataset() -> Vec<Prompt> {
        let mut cfg = TaskGenConfig::two_tier_default();
        cfg.n_prompts = 200;
        generate(&cfg).unwrap()
    }

    fn small_config() -> RunConfig {
        RunConfig {
            trainer: TrainerConfig {
                total_steps: 20,
                batch_size: 16,
                ..TrainerConfig::default()
            },
            eval_cadence: 5,
            checkpoint_every: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = RunConfig::from_toml_str("[trainer]\nrho = \"lots\"\n").unwrap_err();
        assert!(err.to_string().contains("trainer.rho"), "{err}");
        let err = RunConfig::from_toml_str("algorithm = \"sgd\"\n").unwrap_err();
        assert!(err.to_string().contains("algorithm"), "{err}");
        let err = RunConfig::from_toml_str("[reward]\nalpha_a = 0.1\nalpha_c = 0.5\nalpha_f = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("reward"), "{err}");
        let cfg = RunConfig::from_toml_str("eval_cadence = 0\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("eval_cadence"));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = small_config();
        cfg.algorithm = Algorithm::GrpoCollab;
        cfg.ratio_sweep = vec![0.2, 0.4];
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_dataset_file_is_a_config_error() {
        let cfg = RunConfig {
            dataset: PathBuf::from("/nonexistent/data.jsonl"),
            ..small_config()
        };
        let err = cfg.validate_with_dataset().unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let d = small_dataset();
        let (a, b) = split_dataset(&d, 0.2, 3).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        assert_eq!(b.len(), 40);
        let (a2, _) = split_dataset(&d, 0.2, 3).unwrap();
        assert_eq!(a, a2);
        let (a3, _) = split_dataset(&d, 0.2, 4).unwrap();
        assert_ne!(a, a3);
        assert!(a.iter().all(|p| !b.iter().any(|q| q.id == p.id)));
    }

    #[test]
    fn execute_emits_one_row_per_iteration_and_cadenced_evals() {
        let out = execute(&small_config(), &small_dataset()).unwrap();
        assert_eq!(out.rows.len(), 20);
        let evals: Vec<usize> = out
            .rows
            .iter()
            .filter(|r| r.eval_collaborative_accuracy.is_some())
            .map(|r| r.iteration)
            .collect();
        assert_eq!(evals, vec![5, 10, 15, 20]);
        assert_eq!(out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![10, 20]);
        assert_eq!(out.summary.budget_violations, 0);
    }

    #[test]
    fn every_algorithm_runs() {
        let d = small_dataset();
        for algorithm in [
            Algorithm::Gapg,
            Algorithm::Grpo,
            Algorithm::GrpoCollab,
            Algorithm::Router,
            Algorithm::Naive,
        ] {
            let cfg = RunConfig {
                algorithm,
                ratio_sweep: vec![0.2],
                ..small_config()
            };
            let out = execute(&cfg, &d).unwrap();
            assert_eq!(out.summary.sweep.len(), 1);
            assert_eq!(out.router.is_some(), algorithm == Algorithm::Router);
            if algorithm == Algorithm::Grpo {
                assert_eq!(out.summary.final_eval.cloud_calls, 0);
            }
        }
    }

    #[test]
    fn metrics_csv_round_trips_with_schema_line() {
        let out = execute(&small_config(), &small_dataset()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &out.rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# metrics-schema: 1\niteration,mean_reward,call_ratio,"));
        assert_eq!(read_metrics_csv(&path).unwrap(), out.rows);
        write_metrics_csv(&path, &[]).unwrap();
        assert!(read_metrics_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn report_requires_runs_and_metrics() {
        assert!(matches!(report(&[]), Err(Error::NoRuns)));
        let dir = tempfile::tempdir().unwrap();
        let err = report(&[dir.path().to_path_buf()]).unwrap_err();
        assert!(matches!(err, Error::MissingMetrics { .. }));
    }
}
