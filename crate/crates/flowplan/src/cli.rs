//! Command-line interface: dataset generation, training, evaluation,
//! bound verification, and report regeneration.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 bound
//! violation from `theory`. The FLOWPLAN_SEED environment variable, when
//! set, overrides every seed an invocation would otherwise use.

use crate::decoding::DecodeMode;
use crate::environment::{
    generate_dataset, load_trajectories, save_trajectories, ExpertTrajectory, GenConfig, Task,
};
use crate::error::{FlowError, Result};
use crate::executor::{
    default_horizon, load_episodes, run_closed_loop, run_open_loop, run_stepwise_baseline,
    save_episodes, EpisodeRecord,
};
use crate::metrics::{compute_metrics, write_report};
use crate::numerics::rng::{hash_str, SeededRng};
use crate::theory::{
    temperature_sweep, verify_gronwall, verify_prop1, verify_prop2, verify_thm1, verify_thm2,
    BoundReport,
};
use crate::training::{train, ModelBundle, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Parser)]
#[command(
    name = "flowplan",
    version,
    about = "Latent-flow tool planner: data, training, evaluation, bound checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Closed,
    Open,
    Stepwise,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Gronwall,
    Prop1,
    Prop2,
    Thm1,
    Thm2,
    Temperature,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset as JSONL.
    Gen {
        #[arg(long, default_value_t = 200)]
        tasks: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of tools flagged as held out per toolset.
        #[arg(long, default_value_t = 0.0)]
        unseen_frac: f64,
        #[arg(long, default_value_t = 2)]
        chain_min: usize,
        #[arg(long, default_value_t = 5)]
        chain_max: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        toolset_size: usize,
        /// Standard deviation of query noise around the goal.
        #[arg(long, default_value_t = 0.01)]
        sigma_query: f64,
        /// Generate branched chains (observation-dependent continuations).
        #[arg(long)]
        branched: bool,
    },
    /// Train a planner on a JSONL dataset and write checkpoints.
    Train {
        /// JSON training config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (stage checkpoints, final model, history).
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a trained planner over a dataset; write episodes and metrics.
    Eval {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Closed)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
        /// Observation noise; defaults to the value the model trained with.
        #[arg(long)]
        sigma_obs: Option<f64>,
        /// Sampled decoding instead of the MAP default.
        #[arg(long)]
        sample: bool,
    },
    /// Verify the numerical bounds and write one CSV per report.
    Theory {
        #[arg(long, value_enum, default_value_t = Check::All)]
        check: Check,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Rebuild metric reports from a directory holding episodes.jsonl and
    /// tasks.jsonl (as written by `eval`).
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let seed_override = match seed_from_env() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    match dispatch(cli.command, seed_override) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("FLOWPLAN_SEED") {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| FlowError::input(format!("FLOWPLAN_SEED is not a valid seed: '{raw}'"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(command: Command, seed_override: Option<u64>) -> Result<i32> {
    match command {
        Command::Gen {
            tasks,
            seed,
            out,
            unseen_frac,
            chain_min,
            chain_max,
            dim,
            toolset_size,
            sigma_query,
            branched,
        } => {
            let config = GenConfig {
                tasks,
                dim,
                toolset_size,
                chain_min,
                chain_max,
                unseen_frac,
                sigma_query,
                branched,
                seed: seed_override.unwrap_or(seed),
            };
            let generated = generate_dataset(&config)?;
            let items: Vec<(Task, ExpertTrajectory)> = generated
                .into_iter()
                .map(|t| (t, ExpertTrajectory::default()))
                .collect();
            save_trajectories(&out, &items)?;
            println!("wrote {} tasks to {}", items.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Train { config, data, out } => {
            let mut cfg = match config {
                Some(path) => {
                    let bytes = std::fs::read(&path)?;
                    serde_json::from_slice::<TrainConfig>(&bytes).map_err(|e| {
                        FlowError::Parse {
                            line: 1,
                            msg: format!("train config: {e}"),
                        }
                    })?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed_override {
                cfg.seed = s;
            }
            cfg.checkpoint_dir = Some(out.clone());
            let items = load_trajectories(&data, cfg.dim)?;
            let (_, history) = train(&cfg, &items)?;
            let last = history.rows.last();
            println!(
                "trained {} epochs; final dev tool EM {}",
                history.rows.len(),
                last.map(|r| r.dev_tool_em.to_string())
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
            out,
            sigma_obs,
            sample,
        } => {
            let bundle = ModelBundle::load(&checkpoint, "model")?;
            let items = load_trajectories(&data, bundle.config.dim)?;
            let seed = seed_override.unwrap_or(bundle.config.seed);
            let sigma = sigma_obs.unwrap_or(bundle.config.sigma_obs);
            let decode = if sample {
                DecodeMode::Sampled
            } else {
                DecodeMode::Map
            };
            let mut episodes = Vec::with_capacity(items.len());
            for (task, _) in &items {
                let mut rng = SeededRng::labeled(seed, "cli-eval", hash_str(&task.id));
                let episode = match mode {
                    EvalMode::Closed => run_closed_loop(
                        &bundle,
                        task,
                        seed,
                        sigma,
                        decode,
                        default_horizon(task),
                        &mut rng,
                    )?,
                    EvalMode::Open => run_open_loop(&bundle, task, seed, sigma, decode, &mut rng)?,
                    EvalMode::Stepwise => run_stepwise_baseline(&bundle, task, seed, sigma)?,
                };
                episodes.push(episode);
            }
            write_eval_outputs(&out, &items, &episodes)?;
            Ok(EXIT_OK)
        }
        Command::Theory { check, out, seed } => {
            let seed = seed_override.unwrap_or(seed);
            let reports = theory_reports(check, seed)?;
            std::fs::create_dir_all(&out)?;
            let mut summary = Vec::new();
            let mut violated = false;
            for report in &reports {
                report.validate()?;
                let csv_path = out.join(format!("bound_{}.csv", report.id));
                write_atomic(&csv_path, report.to_csv().as_bytes())?;
                summary.push(json!({
                    "id": report.id,
                    "measured": report.measured,
                    "bound": report.bound,
                    "violations": report.violations,
                    "trials": report.trials,
                }));
                if report.violations > 0 {
                    violated = true;
                    eprintln!(
                        "bound violation: {} ({} of {} trials)",
                        report.id, report.violations, report.trials
                    );
                }
            }
            let digest = serde_json::to_string_pretty(&serde_json::to_value(&summary).unwrap())
                .expect("summary serializes");
            write_atomic(&out.join("theory.json"), digest.as_bytes())?;
            for report in &reports {
                println!(
                    "{}: measured {} vs bound {} ({} violations / {} trials)",
                    report.id, report.measured, report.bound, report.violations, report.trials
                );
            }
            Ok(if violated { EXIT_VIOLATION } else { EXIT_OK })
        }
        Command::Report { input, out } => {
            let episodes = load_episodes(&input.join("episodes.jsonl"))?;
            let dim = probe_dim(&input.join("tasks.jsonl"))?;
            let items = load_trajectories(&input.join("tasks.jsonl"), dim)?;
            let tasks: Vec<Task> = items.into_iter().map(|(t, _)| t).collect();
            let metrics = compute_metrics(&episodes, &tasks)?;
            write_report(&out, &metrics, None, &[])?;
            println!("wrote metrics for {} episodes to {}", episodes.len(), out.display());
            Ok(EXIT_OK)
        }
    }
}

/// Reads the embedding width from the first record so report regeneration
/// does not need a dimension flag.
fn probe_dim(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| FlowError::Parse {
                line: 1,
                msg: e.to_string(),
            })?;
        if let Some(e) = value
            .get("tools")
            .and_then(|t| t.get(0))
            .and_then(|t| t.get("embedding"))
            .and_then(|e| e.as_array())
        {
            return Ok(e.len());
        }
        return Err(FlowError::Parse {
            line: 1,
            msg: "first record carries no tool embedding".into(),
        });
    }
    Err(FlowError::input("tasks file is empty"))
}

fn write_eval_outputs(
    out: &Path,
    items: &[(Task, ExpertTrajectory)],
    episodes: &[EpisodeRecord],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    save_episodes(&out.join("episodes.jsonl"), episodes)?;
    save_trajectories(&out.join("tasks.jsonl"), items)?;
    let tasks: Vec<Task> = items.iter().map(|(t, _)| t.clone()).collect();
    let metrics = compute_metrics(episodes, &tasks)?;
    write_report(out, &metrics, None, &[])?;
    let all = &metrics.groups["all"];
    println!(
        "{} episodes: tool EM {}, overall success {}",
        all.episodes, all.tool_em, all.overall_success
    );
    Ok(())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the selected bound checks at CLI-scale defaults.
pub fn theory_reports(check: Check, seed: u64) -> Result<Vec<BoundReport>> {
    let mut reports = Vec::new();
    let want = |c: Check| check == c || matches!(check, Check::All);
    if want(Check::Gronwall) {
        for k_u in [0.0, 0.5, 1.0, 2.0] {
            for delta in [1e-3, 1e-2, 1e-1] {
                reports.push(verify_gronwall(k_u, delta, 100, 64, seed)?);
            }
        }
    }
    if want(Check::Prop1) {
        reports.push(verify_prop1(2000, seed)?);
    }
    if want(Check::Prop2) {
        reports.push(verify_prop2(1000, seed)?);
    }
    if want(Check::Thm1) {
        // The robustness surface is measured on a briefly imitation-trained
        // planner; an untrained field has no anchor structure to perturb.
        let config = TrainConfig {
            dim: 8,
            steps: 16,
            hidden: vec![32],
            stop_hidden: 16,
            mc_draws: 4,
            stage1_epochs: 4,
            stage2_epochs: 2,
            stage3_epochs: 0,
            seed,
            ..TrainConfig::default()
        };
        let gen = GenConfig {
            tasks: 24,
            dim: 8,
            chain_min: 2,
            chain_max: 3,
            seed: seed ^ 0x7a1,
            ..GenConfig::default()
        };
        let data: Vec<(Task, ExpertTrajectory)> = generate_dataset(&gen)?
            .into_iter()
            .map(|t| (t, ExpertTrajectory::default()))
            .collect();
        let (bundle, _) = train(&config, &data)?;
        reports.push(verify_thm1(
            &bundle,
            &data,
            &[0.0, 0.05, 0.1, 0.2],
            &[0.0, 0.05, 0.1, 0.5],
            &[0.0, 0.1, 0.3, 1.0],
            4,
            seed,
        )?);
    }
    if want(Check::Thm2) {
        reports.push(verify_thm2(
            &[17, 9, 5, 3],
            &[0.0, 0.1, 0.25, 0.5],
            32,
            (4, 3),
            seed,
        )?);
    }
    if want(Check::Temperature) {
        reports.push(temperature_sweep(
            &[0.01, 0.05, 0.1, 0.2, 0.5],
            20,
            200,
            3,
            seed,
        )?);
    }
    Ok(reports)
}
