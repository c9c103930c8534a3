//! `gapg-lab`: dataset generation, training, evaluation, verification and reports.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or config
//! error, 3 any other runtime failure (I/O, numerics).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gapg_core::baselines::{route_and_eval, train_router, EvalMode, RouterFit};
use gapg_core::domain::{read_dataset, write_dataset};
use gapg_core::harness::{self, resolve_out_dir, Algorithm, RunConfig};
use gapg_core::oracle::{verify_gradcheck, verify_unbiasedness};
use gapg_core::tasks::{generate, TaskGenConfig};
use gapg_core::{Error, PolicyParams};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gapg-lab", version, about = "Device-cloud collaborative policy-gradient lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic prompt dataset (JSONL).
    GenTasks {
        /// Task generator config (TOML); the built-in two-tier default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one algorithm and write its run directory.
    Train {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// Dataset file; overrides the config's `dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run config (TOML); the algorithm's preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's `out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// With `--algo grpo`: train on the collaboration reward with the help action.
        #[arg(long)]
        collab_reward: bool,
    },
    /// Fit the two-stage router against a trained device policy.
    TrainRouter {
        #[arg(long)]
        dataset: PathBuf,
        /// Device policy checkpoint.
        #[arg(long)]
        policy: PathBuf,
        /// Run config supplying `[router]` settings and the seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output router JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint under a cloud-call cap.
    Eval {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        cap: f64,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Router JSON from `train-router`; required for `--mode router`.
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact-enumeration and finite-difference checks; exits 1 on failure.
    Verify {
        #[command(subcommand)]
        check: Check,
    },
    /// Merge run directories into report.csv and report.md.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum Check {
    /// The group estimator's expectation equals the true gradient.
    Unbiasedness {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        #[arg(long, default_value = "unbiasedness.json")]
        report: PathBuf,
    },
    /// Analytic gradients match central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value = "gradcheck.json")]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Gapg,
    Grpo,
    GrpoCollab,
    Router,
    Naive,
}

impl AlgoArg {
    fn algorithm(self, collab_reward: bool) -> Result<Algorithm> {
        Ok(match (self, collab_reward) {
            (AlgoArg::Grpo, true) | (AlgoArg::GrpoCollab, _) => Algorithm::GrpoCollab,
            (_, true) => {
                return Err(Error::config("--collab-reward", "only applies to --algo grpo").into());
            }
            (AlgoArg::Gapg, _) => Algorithm::Gapg,
            (AlgoArg::Grpo, _) => Algorithm::Grpo,
            (AlgoArg::Router, _) => Algorithm::Router,
            (AlgoArg::Naive, _) => Algorithm::Naive,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Device,
    Naive,
    Router,
    PolicyRouted,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(
    algo: AlgoArg,
    dataset: Option<PathBuf>,
    config: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    collab_reward: bool,
) -> Result<()> {
    let algorithm = algo.algorithm(collab_reward)?;
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(algorithm),
    };
    cfg.algorithm = algorithm;
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let (dir, summary) = harness::run(&cfg)?;
    let e = &summary.final_eval;
    println!(
        "{}: device {:.4}  collaborative {:.4}  cloud calls {:.4}  help {:.4}  -> {}",
        algorithm.name(),
        e.device_accuracy,
        e.collaborative_accuracy,
        e.cloud_call_ratio,
        e.help_request_ratio,
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenTasks { config, out } => {
            let cfg = match config {
                Some(path) => TaskGenConfig::load(&path)?,
                None => TaskGenConfig::two_tier_default(),
            };
            let prompts = generate(&cfg)?;
            let out = resolve_out_dir(&out);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_dataset(&out, &prompts)?;
            println!("wrote {} prompts to {}", prompts.len(), out.display());
        }
        Command::Train {
            algo,
            dataset,
            config,
            out_dir,
            collab_reward,
        } => train(algo, dataset, config, out_dir, collab_reward)?,
        Command::TrainRouter {
            dataset,
            policy,
            config,
            out,
        } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::preset(Algorithm::Router),
            };
            cfg.validate()?;
            let prompts = read_dataset(&dataset)?;
            let params = PolicyParams::load(&policy)?;
            let fit = train_router(
                &prompts,
                &params,
                cfg.router.n_samples,
                cfg.trainer.seed,
                &cfg.router.logistic(),
            )?;
            let out = resolve_out_dir(&out);
            write_json(&out, &fit)?;
            println!(
                "router: train accuracy {:.4}, positive rate {:.4} -> {}",
                fit.train_accuracy,
                fit.positive_rate,
                out.display()
            );
        }
        Command::Eval {
            mode,
            cap,
            dataset,
            policy,
            router,
            seed,
            out,
        } => {
            let prompts = read_dataset(&dataset)?;
            let params = PolicyParams::load(&policy)?;
            let fit: Option<RouterFit> = match router {
                Some(path) => Some(serde_json::from_str(&fs::read_to_string(&path)?)?),
                None => None,
            };
            let mode = match mode {
                ModeArg::Device => EvalMode::Device,
                ModeArg::Naive => EvalMode::Naive,
                ModeArg::PolicyRouted => EvalMode::PolicyRouted,
                ModeArg::Router => EvalMode::Router(
                    &fit.as_ref()
                        .ok_or_else(|| Error::config("--router", "required for --mode router"))?
                        .params,
                ),
            };
            let report = route_and_eval(&params, mode, &prompts, cap, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = out {
                write_json(&resolve_out_dir(&out), &report)?;
            }
        }
        Command::Verify { check } => {
            let (passed, summary, path) = match check {
                Check::Unbiasedness {
                    seeds,
                    tolerance,
                    report,
                } => {
                    let r = verify_unbiasedness(seeds, tolerance)?;
                    let path = resolve_out_dir(&report);
                    write_json(&path, &r)?;
                    let line = format!(
                        "unbiasedness: {} cases, max error {:.3e}, uncorrected scaling error {:.3e} (tol {tolerance:e})",
                        r.cases.len(),
                        r.max_error,
                        r.max_uncorrected_error
                    );
                    (r.passed, line, path)
                }
                Check::Gradcheck {
                    instances,
                    step,
                    tolerance,
                    report,
                } => {
                    let r = verify_gradcheck(instances, step, tolerance)?;
                    let path = resolve_out_dir(&report);
                    write_json(&path, &r)?;
                    let line = format!(
                        "gradcheck: {instances} instances, log-prob rel error {:.3e}, true-gradient rel error {:.3e} (tol {tolerance:e})",
                        r.max_log_prob_error, r.max_true_gradient_error
                    );
                    (r.passed, line, path)
                }
            };
            println!(
                "{} {summary} -> {}",
                if passed { "PASS" } else { "FAIL" },
                path.display()
            );
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { runs, out_dir } => {
            let report = harness::report(&runs)?;
            let out = resolve_out_dir(&out_dir);
            harness::write_report(&report, &out)?;
            print!("{}", report.markdown);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig { .. }
            | Error::Parse { .. }
            | Error::NoRuns
            | Error::MissingMetrics { .. }
            | Error::EmptyDataset,
        ) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
