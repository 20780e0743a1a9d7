//! Episode execution: closed-loop replanning, single-shot open-loop
//! execution, a nearest-tool stepwise baseline, and the paired-noise
//! protocol that measures how context errors propagate under each regime.

use crate::decoding::{decode_plan, DecodeMode};
use crate::environment::{
    initial_context, update_context, ContextNets, EnvState, Task,
};
use crate::error::{FlowError, Result};
use crate::flow::{sample_plan, IntegrationMethod};
use crate::numerics::rng::SeededRng;
use crate::numerics::vec::dist;
use crate::training::ModelBundle;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// How an episode was driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Replan after every executed tool from the refreshed context.
    Closed,
    /// One plan at phase 1, executed to its decoded end.
    Open,
    /// Nearest tool to the projected context, no latent planning.
    Stepwise,
}

/// Everything observable about one executed episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub mode: ExecMode,
    /// Tool indices in execution order.
    pub executed: Vec<usize>,
    /// Stop probability at each acted-on anchor, one per planning round.
    pub stop_probs: Vec<f64>,
    /// True when the episode ended because the stop head fired.
    pub halted_by_stop: bool,
    /// Planning rounds performed.
    pub phases: usize,
    pub horizon: usize,
}

/// Phase budget: enough room to finish the chain and then demonstrate a
/// clean stop, with slack for one recovery per step.
pub fn default_horizon(task: &Task) -> usize {
    2 * task.gold.len() + 2
}

/// Runs one closed-loop episode: plan two anchors from the current
/// context, act on the first, refresh the context with the observation,
/// repeat until the stop head fires on the first anchor or the horizon is
/// spent.
pub fn run_closed_loop(
    bundle: &ModelBundle,
    task: &Task,
    env_seed: u64,
    sigma_obs: f64,
    decode: DecodeMode,
    horizon: usize,
    rng: &mut SeededRng,
) -> Result<EpisodeRecord> {
    if horizon == 0 {
        return Err(FlowError::input("horizon must be positive"));
    }
    let cfg = &bundle.config;
    let mut env = EnvState::new(task, env_seed, sigma_obs);
    let mut ctx = initial_context(task);
    let mut executed = Vec::new();
    let mut stop_probs = Vec::new();
    let mut halted_by_stop = false;
    let mut phases = 0;
    for _ in 0..horizon {
        phases += 1;
        let plan = sample_plan(
            &bundle.velocity,
            &ctx.vector,
            cfg.steps,
            IntegrationMethod::RungeKutta4,
            2,
            cfg.burn_in,
            rng,
        )?;
        let decoded = decode_plan(
            &plan,
            &task.toolset,
            cfg.epsilon,
            &bundle.stop,
            cfg.theta_stop,
            &ctx.vector,
            decode,
            rng,
        )?;
        stop_probs.push(decoded.stop_probs[0]);
        if decoded.stopped_at == Some(0) {
            halted_by_stop = true;
            break;
        }
        let tool = decoded.tools[0];
        let observation = env.execute(task, tool)?;
        ctx = update_context(
            &bundle.context,
            &ctx,
            tool,
            &task.toolset,
            &observation,
            None,
        )?;
        executed.push(tool);
    }
    Ok(EpisodeRecord {
        task_id: task.id.clone(),
        mode: ExecMode::Closed,
        executed,
        stop_probs,
        halted_by_stop,
        phases,
        horizon,
    })
}

/// Runs one open-loop episode: a single plan from the initial context with
/// one anchor per gold step plus the stop anchor, executed through its
/// decoded, stop-truncated tool sequence with no context refresh.
pub fn run_open_loop(
    bundle: &ModelBundle,
    task: &Task,
    env_seed: u64,
    sigma_obs: f64,
    decode: DecodeMode,
    rng: &mut SeededRng,
) -> Result<EpisodeRecord> {
    let cfg = &bundle.config;
    let mut env = EnvState::new(task, env_seed, sigma_obs);
    let ctx = initial_context(task);
    let plan = sample_plan(
        &bundle.velocity,
        &ctx.vector,
        cfg.steps,
        IntegrationMethod::RungeKutta4,
        task.gold.len() + 1,
        cfg.burn_in,
        rng,
    )?;
    let decoded = decode_plan(
        &plan,
        &task.toolset,
        cfg.epsilon,
        &bundle.stop,
        cfg.theta_stop,
        &ctx.vector,
        decode,
        rng,
    )?;
    let mut executed = Vec::new();
    for &tool in &decoded.tools {
        env.execute(task, tool)?;
        executed.push(tool);
    }
    Ok(EpisodeRecord {
        task_id: task.id.clone(),
        mode: ExecMode::Open,
        executed,
        stop_probs: decoded.stop_probs.clone(),
        halted_by_stop: decoded.stopped_at.is_some(),
        phases: 1,
        horizon: task.gold.len() + 1,
    })
}

/// Stepwise baseline: executes the tool nearest the projected context for
/// exactly the gold chain length. It has no stop head; it is credited with
/// a stop exactly when every pick was correct, so its stop row measures
/// only its action quality.
pub fn run_stepwise_baseline(
    bundle: &ModelBundle,
    task: &Task,
    env_seed: u64,
    sigma_obs: f64,
) -> Result<EpisodeRecord> {
    let mut env = EnvState::new(task, env_seed, sigma_obs);
    let mut ctx = initial_context(task);
    let mut executed = Vec::new();
    for _ in 0..task.gold.len() {
        let projected = bundle.w_c.apply(&ctx.vector)?;
        let (tool, _) = task.toolset.nearest(&projected);
        let observation = env.execute(task, tool)?;
        ctx = update_context(
            &bundle.context,
            &ctx,
            tool,
            &task.toolset,
            &observation,
            None,
        )?;
        executed.push(tool);
    }
    let completed = env.completed(task);
    Ok(EpisodeRecord {
        task_id: task.id.clone(),
        mode: ExecMode::Stepwise,
        executed,
        stop_probs: Vec::new(),
        halted_by_stop: completed,
        phases: task.gold.len(),
        horizon: task.gold.len(),
    })
}

/// Context error traces from one paired run. Both regimes see the same
/// gold executions and the same injected observation noise; only the
/// propagation differs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedErrorRun {
    /// Injected disturbance magnitude per phase, measured after the
    /// observation encoder.
    pub injections: Vec<f64>,
    /// Context error after each phase under closed-loop refresh; index 0
    /// is the error before any observation, always zero.
    pub closed: Vec<f64>,
    /// Accumulated error under open-loop execution: the same disturbances
    /// with no contraction between phases.
    pub open: Vec<f64>,
}

/// Executes the gold chain once, then replays the context recursion twice
/// over the same observations: a clean reference trace, and a perturbed
/// trace whose observations carry noise of scale `sigma_noise`. The closed
/// error is the measured distance between the two context states; the open
/// error adds the same injections without decay.
pub fn paired_context_error_run(
    nets: &ContextNets,
    task: &Task,
    env_seed: u64,
    sigma_obs: f64,
    sigma_noise: f64,
    rng: &mut SeededRng,
) -> Result<PairedErrorRun> {
    let mut env = EnvState::new(task, env_seed, sigma_obs);
    let mut observations = Vec::with_capacity(task.gold.len());
    for &tool in &task.gold {
        observations.push(env.execute(task, tool)?);
    }
    let mut clean = initial_context(task);
    let mut noisy_vec = clean.vector.clone();
    let mut injections = Vec::with_capacity(task.gold.len());
    let mut closed = vec![0.0];
    let mut open = vec![0.0];
    for (h, &tool) in task.gold.iter().enumerate() {
        let mut perturbed = observations[h].clone();
        for x in &mut perturbed {
            *x += sigma_noise * rng.normal();
        }
        let inject_clean = nets.inject(task.toolset.embedding(tool), &observations[h])?;
        let inject_noisy = nets.inject(task.toolset.embedding(tool), &perturbed)?;
        injections.push(dist(&inject_noisy, &inject_clean));

        let carry_noisy = nets.carry(&noisy_vec)?;
        noisy_vec = carry_noisy
            .iter()
            .zip(&inject_noisy)
            .map(|(a, b)| a + b)
            .collect();
        clean = update_context(nets, &clean, tool, &task.toolset, &observations[h], None)?;
        closed.push(dist(&noisy_vec, &clean.vector));
        open.push(open[h] + injections[h]);
    }
    Ok(PairedErrorRun {
        injections,
        closed,
        open,
    })
}

/// Appends episodes as JSON lines, atomically.
pub fn save_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        for ep in episodes {
            let line = serde_json::to_string(ep)
                .map_err(|e| FlowError::input(format!("episode serialization: {e}")))?;
            writeln!(f, "{line}")?;
        }
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads episodes written by `save_episodes`.
pub fn load_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeRecord = serde_json::from_str(line).map_err(|e| FlowError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ep);
    }
    Ok(out)
}
