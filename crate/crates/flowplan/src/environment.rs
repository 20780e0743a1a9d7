//! The closed-loop world the planner acts in: synthetic task generation
//! with gold tool chains, tool execution with informative observations, a
//! contractive context-state update, the plan utility, and trajectory-file
//! ingestion.
//!
//! Observation dynamics are the one place the environment leaks
//! information the initial query does not carry: a successful call embeds
//! a half-strength copy of the next gold tool. Closed-loop replanning can
//! exploit that signal; open-loop execution cannot, which is what makes
//! the closed-vs-open comparison meaningful in experiments.

use crate::error::{FlowError, Result};
use crate::numerics::net::{Activation, DenseNet};
use crate::numerics::rng::{hash_str, SeededRng};
use crate::numerics::vec::{dist, norm, normalized, scale};
use crate::semantic::{circle_point, random_plane, PhaseTag, Tool, Toolset};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

/// Salt for hashing tool descriptions in files that carry no embeddings.
const DESCRIPTION_SALT: u64 = 0x746f_6f6c_7365_7400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One planning problem: a toolset, a hidden gold chain, and the query
/// vector that seeds the context state.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub toolset: Toolset,
    /// Gold chain as indices into the toolset; never empty, no immediate
    /// repeats.
    pub gold: Vec<usize>,
    /// Normalized mean of the gold tool embeddings.
    pub goal: Vec<f64>,
    /// Initial query vector; becomes the phase-1 context.
    pub query: Vec<f64>,
    /// Per-tool held-out flag, aligned with the toolset.
    pub unseen: Vec<bool>,
}

impl Task {
    pub fn chain_len(&self) -> usize {
        self.gold.len()
    }

    /// True when any gold step uses an unseen-flagged tool.
    pub fn touches_unseen(&self) -> bool {
        self.gold.iter().any(|&t| self.unseen[t])
    }
}

/// Expert annotations aligned with the gold chain, when the source file
/// provides them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertTrajectory {
    pub rationales: Option<Vec<String>>,
    pub observations: Option<Vec<String>>,
}

/// Hidden execution state for one episode.
#[derive(Debug, Clone)]
pub struct EnvState {
    progress: usize,
    rng: SeededRng,
    sigma_obs: f64,
}

impl EnvState {
    /// Per-task stream: the same (seed, task) always replays identically.
    pub fn new(task: &Task, seed: u64, sigma_obs: f64) -> Self {
        EnvState {
            progress: 0,
            rng: SeededRng::labeled(seed, "env", hash_str(&task.id)),
            sigma_obs,
        }
    }

    pub fn progress(&self) -> usize {
        self.progress
    }

    pub fn completed(&self, task: &Task) -> bool {
        self.progress == task.gold.len()
    }

    /// Executes one tool call.
    ///
    /// The correct next gold tool advances progress and returns an
    /// informative observation: its own embedding plus half the embedding
    /// of the tool that should come next (nothing extra after the final
    /// step). Any other tool leaves progress unchanged and returns a
    /// failure signature, minus half the attempted embedding.
    pub fn execute(&mut self, task: &Task, tool: usize) -> Result<Vec<f64>> {
        if tool >= task.toolset.len() {
            return Err(FlowError::input(format!(
                "tool index {tool} outside toolset of {}",
                task.toolset.len()
            )));
        }
        let d = task.toolset.dim();
        let mut o = vec![0.0; d];
        if self.progress < task.gold.len() && tool == task.gold[self.progress] {
            let e = task.toolset.embedding(tool);
            o.copy_from_slice(e);
            self.progress += 1;
            if self.progress < task.gold.len() {
                let next = task.toolset.embedding(task.gold[self.progress]);
                for i in 0..d {
                    o[i] += 0.5 * next[i];
                }
            }
        } else {
            let e = task.toolset.embedding(tool);
            for i in 0..d {
                o[i] = -0.5 * e[i];
            }
        }
        if self.sigma_obs > 0.0 {
            for oi in o.iter_mut() {
                *oi += self.sigma_obs * self.rng.normal();
            }
        }
        Ok(o)
    }
}

/// One executed step as remembered by the context.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub tool: usize,
    pub observation: Vec<f64>,
    pub rationale: Option<String>,
}

/// The agent-side state: the context vector the planner conditions on,
/// plus the raw record it was distilled from.
#[derive(Debug, Clone)]
pub struct ContextState {
    pub vector: Vec<f64>,
    pub record: Vec<StepRecord>,
    /// Phase counter, 1-based; always record.len() + 1.
    pub phase: usize,
}

/// Phase-1 context: the query vector, an empty record.
pub fn initial_context(task: &Task) -> ContextState {
    ContextState {
        vector: task.query.clone(),
        record: Vec::new(),
        phase: 1,
    }
}

/// Replays a context record against the gold chain to recover the hidden
/// progress index.
pub fn replay_progress(task: &Task, record: &[StepRecord]) -> usize {
    let mut p = 0;
    for step in record {
        if p < task.gold.len() && step.tool == task.gold[p] {
            p += 1;
        }
    }
    p
}

/// Frozen nets of the context update
/// c' = rho * (W_u c) + (1 - rho) * tanh(W_in [e_tool ; enc(o)]).
///
/// W_u is spectrally normalized to operator norm <= 1 at construction, so
/// the update is a contraction with ratio <= rho in the context vector by
/// construction rather than by hope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextNets {
    pub w_update: DenseNet,
    pub w_input: DenseNet,
    pub obs_enc: DenseNet,
    pub rho: f64,
    dim: usize,
}

/// Largest singular value of a d x d linear layer by power iteration with
/// a deterministic start vector.
fn operator_norm(weights: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut u = vec![0.0; d];
    let mut sigma = 0.0;
    for _ in 0..20 {
        for i in 0..d {
            u[i] = (0..d).map(|j| weights[i * d + j] * v[j]).sum();
        }
        let nu = norm(&u);
        if nu < 1e-300 {
            return 0.0;
        }
        for x in u.iter_mut() {
            *x /= nu;
        }
        for j in 0..d {
            v[j] = (0..d).map(|i| weights[i * d + j] * u[i]).sum();
        }
        sigma = norm(&v);
        if sigma < 1e-300 {
            return 0.0;
        }
        for x in v.iter_mut() {
            *x /= sigma;
        }
    }
    sigma
}

impl ContextNets {
    /// Frozen structured init: W_u starts as the identity (norm exactly 1),
    /// the observation encoder is the identity, and the input projection is
    /// a pair of scaled identity blocks, tool at 0.25 and observation at 1.0,
    /// plus a small seeded jitter. Tanh arguments stay in the near-linear
    /// regime, so each update writes the step's tool and observation into the
    /// context almost additively instead of scrambling them; downstream
    /// readers can recover the execution history with a linear probe.
    pub fn frozen_init(dim: usize, rho: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(FlowError::input(format!("rho {rho} outside [0, 1)")));
        }
        let mut rng = SeededRng::labeled(seed, "context-nets", 0);
        let mut w_input = DenseNet::random(&[2 * dim, dim], &[Activation::Tanh], 0.05, &mut rng)?;
        for i in 0..dim {
            w_input.layers[0].weights[i * 2 * dim + i] += 0.25;
            w_input.layers[0].weights[i * 2 * dim + dim + i] += 1.0;
        }
        let mut nets = ContextNets {
            w_update: DenseNet::identity_linear(dim)?,
            w_input,
            obs_enc: DenseNet::identity_linear(dim)?,
            rho,
            dim,
        };
        nets.normalize_update();
        Ok(nets)
    }

    /// Rescales W_u so its operator norm is at most 1.
    pub fn normalize_update(&mut self) {
        let sigma = operator_norm(&self.w_update.layers[0].weights, self.dim);
        if sigma > 1.0 {
            for w in self.w_update.layers[0].weights.iter_mut() {
                *w /= sigma;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The context half-map rho * W_u c, exposed for contraction probes.
    pub(crate) fn carry(&self, c: &[f64]) -> Result<Vec<f64>> {
        Ok(scale(&self.w_update.apply(c)?, self.rho))
    }

    pub(crate) fn inject(&self, tool_embedding: &[f64], observation: &[f64]) -> Result<Vec<f64>> {
        let enc = self.obs_enc.apply(observation)?;
        let mut input = Vec::with_capacity(2 * self.dim);
        input.extend_from_slice(tool_embedding);
        input.extend_from_slice(&enc);
        Ok(scale(&self.w_input.apply(&input)?, 1.0 - self.rho))
    }
}

/// Applies the contractive update and appends the step to the record.
pub fn update_context(
    nets: &ContextNets,
    ctx: &ContextState,
    tool: usize,
    toolset: &Toolset,
    observation: &[f64],
    rationale: Option<String>,
) -> Result<ContextState> {
    if tool >= toolset.len() {
        return Err(FlowError::input(format!(
            "tool index {tool} outside toolset of {}",
            toolset.len()
        )));
    }
    let carry = nets.carry(&ctx.vector)?;
    let inject = nets.inject(toolset.embedding(tool), observation)?;
    let vector: Vec<f64> = carry.iter().zip(&inject).map(|(a, b)| a + b).collect();
    let mut record = ctx.record.clone();
    record.push(StepRecord {
        tool,
        observation: observation.to_vec(),
        rationale,
    });
    Ok(ContextState {
        vector,
        record,
        phase: ctx.phase + 1,
    })
}

/// Measured contraction ratio: max over random context pairs sharing one
/// (tool, observation) input of ||dc'|| / ||dc||.
pub fn contraction_estimate(
    nets: &ContextNets,
    toolset: &Toolset,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let d = nets.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let c1 = rng.normal_vec(d);
        let c2 = rng.normal_vec(d);
        let gap = dist(&c1, &c2);
        if gap < 1e-9 {
            continue;
        }
        // The injected term is shared, so only the carry map matters; still
        // measured through the full update for honesty.
        let tool = rng.below(toolset.len());
        let o = rng.normal_vec(d);
        let ctx1 = ContextState {
            vector: c1,
            record: Vec::new(),
            phase: 1,
        };
        let ctx2 = ContextState {
            vector: c2,
            record: Vec::new(),
            phase: 1,
        };
        let n1 = update_context(nets, &ctx1, tool, toolset, &o, None)?;
        let n2 = update_context(nets, &ctx2, tool, toolset, &o, None)?;
        worst = worst.max(dist(&n1.vector, &n2.vector) / gap);
    }
    Ok(worst)
}

/// Utility weights and the plan-length budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UtilityParams {
    pub lambda_cost: f64,
    pub lambda_red: f64,
    pub lambda_cons: f64,
    pub l_max: usize,
}

impl Default for UtilityParams {
    fn default() -> Self {
        UtilityParams {
            lambda_cost: 0.1,
            lambda_red: 0.2,
            lambda_cons: 0.1,
            l_max: 8,
        }
    }
}

/// Components of the plan utility and the assembled scalar.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UtilityBreakdown {
    pub acc: f64,
    pub cost: f64,
    pub red: f64,
    pub cons: f64,
    pub value: f64,
}

/// Scores a decoded plan against the gold chain still remaining from the
/// context's progress.
///
/// Acc is the longest matching prefix over the remaining length (empty
/// remaining: 1 if the plan is also empty, else 0). Cost is effective
/// length over the budget. Red is the immediate-repeat rate. Cons is
/// exp(-mean squared anchor distance to the projected context).
pub fn utility(
    plan: &crate::flow::LatentPlan,
    decoded: &crate::decoding::DecodedPlan,
    task: &Task,
    ctx: &ContextState,
    w_c: &DenseNet,
    params: &UtilityParams,
) -> Result<UtilityBreakdown> {
    let progress = replay_progress(task, &ctx.record);
    let remaining = &task.gold[progress..];
    let eff = decoded.tools.len();

    let acc = if remaining.is_empty() {
        if eff == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        let matched = decoded
            .tools
            .iter()
            .zip(remaining)
            .take_while(|(a, b)| a == b)
            .count();
        matched as f64 / remaining.len() as f64
    };

    let cost = eff as f64 / params.l_max as f64;

    let repeats = decoded
        .tools
        .windows(2)
        .filter(|w| w[0] == w[1])
        .count();
    let red = repeats as f64 / eff.max(1) as f64;

    let target = w_c.apply(&ctx.vector)?;
    let mean_sq = plan
        .anchors
        .iter()
        .map(|z| dist(z, &target).powi(2))
        .sum::<f64>()
        / plan.anchors.len() as f64;
    let cons = (-mean_sq).exp();

    let value = acc - params.lambda_cost * cost - params.lambda_red * red
        + params.lambda_cons * cons;
    Ok(UtilityBreakdown {
        acc,
        cost,
        red,
        cons,
        value,
    })
}

/// Knobs for synthetic dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub tasks: usize,
    pub dim: usize,
    pub toolset_size: usize,
    pub chain_min: usize,
    pub chain_max: usize,
    pub unseen_frac: f64,
    pub sigma_query: f64,
    /// Direction-hiding chains whose branch is revealed only by
    /// observations; used for closed- vs open-loop comparisons.
    pub branched: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            tasks: 200,
            dim: 16,
            toolset_size: 8,
            chain_min: 2,
            chain_max: 5,
            unseen_frac: 0.0,
            sigma_query: 0.01,
            branched: false,
            seed: 17,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(FlowError::input("need at least one task"));
        }
        if self.dim < 2 {
            return Err(FlowError::input("dimension must be at least 2"));
        }
        if self.chain_min < 1 || self.chain_min > self.chain_max {
            return Err(FlowError::input(format!(
                "bad chain length range {}..{}",
                self.chain_min, self.chain_max
            )));
        }
        if self.chain_max > 5 {
            return Err(FlowError::input(
                "chain patterns are defined up to length 5",
            ));
        }
        let longest = if self.branched { 5 } else { self.chain_max };
        if self.toolset_size < longest.max(4) {
            return Err(FlowError::input(format!(
                "toolset of {} too small for chains up to {}",
                self.toolset_size, self.chain_max
            )));
        }
        if self.branched && self.chain_max < 3 {
            return Err(FlowError::input(
                "branched chains need length at least 3",
            ));
        }
        if !(0.0..=1.0).contains(&self.unseen_frac) {
            return Err(FlowError::input("unseen fraction outside [0, 1]"));
        }
        Ok(())
    }
}

const DOMAINS: [&str; 2] = ["orders", "billing"];
const VERBS: [&str; 8] = [
    "search", "fetch", "verify", "update", "cancel", "create", "lookup", "audit",
];
const OBJECTS: [&str; 8] = [
    "order", "invoice", "account", "shipment", "catalog", "ticket", "profile", "ledger",
];

/// Tools evenly spaced on a random great circle, so chain patterns over
/// tool indices are chain patterns over angles.
fn sample_circle_toolset(
    dim: usize,
    count: usize,
    unseen_frac: f64,
    rng: &mut SeededRng,
) -> Result<(Toolset, Vec<bool>)> {
    let (u, w) = random_plane(dim, rng);
    let offset = rng.uniform_in(0.0, std::f64::consts::TAU);
    let step = std::f64::consts::TAU / count as f64;
    let phases = [
        PhaseTag::Retrieval,
        PhaseTag::Verification,
        PhaseTag::DatabaseOp,
        PhaseTag::Other,
    ];
    let tools: Vec<Tool> = (0..count)
        .map(|i| Tool {
            id: format!("tool-{i}"),
            description: format!(
                "{} {} records",
                VERBS[i % VERBS.len()],
                OBJECTS[(i * 3 + 1) % OBJECTS.len()]
            ),
            phase: phases[i % phases.len()],
            embedding: circle_point(&u, &w, offset + i as f64 * step),
        })
        .collect();
    let toolset = Toolset::new(tools)?;
    let unseen_count = (unseen_frac * count as f64).round() as usize;
    let unseen: Vec<bool> = (0..count).map(|i| i >= count - unseen_count).collect();
    Ok((toolset, unseen))
}

/// Gold chain over circle indices for a given center and length. Each
/// length has a distinct index pattern, so the normalized mean embedding
/// identifies both the center and the length; revisits are allowed but
/// immediate repeats never occur.
fn chain_pattern(center: usize, len: usize, direction: i64, n: usize) -> Vec<usize> {
    let at = |off: i64| -> usize {
        let m = n as i64;
        (((center as i64 + off) % m + m) % m) as usize
    };
    let s = direction;
    match len {
        1 => vec![at(0)],
        2 => vec![at(0), at(s)],
        3 => vec![at(0), at(s), at(-s)],
        4 => vec![at(0), at(s), at(0), at(-s)],
        _ => vec![at(0), at(s), at(-s), at(2 * s), at(-2 * s)],
    }
}

/// Unbranched chains reuse the branched patterns at fixed direction +1 for
/// lengths 1 to 3; lengths 4 and 5 break the mirror symmetry so that every
/// (center, length) pair lands at a distinct mean angle.
fn unbranched_chain(center: usize, len: usize, n: usize) -> Vec<usize> {
    let at = |off: i64| -> usize {
        let m = n as i64;
        (((center as i64 + off) % m + m) % m) as usize
    };
    match len {
        4 => vec![at(0), at(1), at(0), at(2)],
        5 => vec![at(0), at(1), at(-1), at(2), at(0)],
        _ => chain_pattern(center, len, 1, n),
    }
}

fn build_task(
    id: String,
    domain: String,
    split: Split,
    toolset: &Toolset,
    unseen: &[bool],
    gold: Vec<usize>,
    sigma_query: f64,
    rng: &mut SeededRng,
) -> Result<Task> {
    let d = toolset.dim();
    let mut mean = vec![0.0; d];
    for &g in &gold {
        for (m, e) in mean.iter_mut().zip(toolset.embedding(g)) {
            *m += e;
        }
    }
    for m in mean.iter_mut() {
        *m /= gold.len() as f64;
    }
    let goal = normalized(&mean)
        .ok_or_else(|| FlowError::numeric("gold chain embeddings cancel to zero"))?;
    let mut query = goal.clone();
    for q in query.iter_mut() {
        *q += sigma_query * rng.normal();
    }
    Ok(Task {
        id,
        domain,
        split,
        toolset: toolset.clone(),
        gold,
        goal,
        query,
        unseen: unseen.to_vec(),
    })
}

/// One self-contained task on a fresh manifold; the entry point exercised
/// by probes that need full control over a single problem.
pub fn generate_task(rng: &mut SeededRng, config: &GenConfig) -> Result<(Task, EnvState)> {
    config.validate()?;
    let (toolset, unseen) = sample_circle_toolset(
        config.dim,
        config.toolset_size,
        config.unseen_frac,
        rng,
    )?;
    let len_lo = if config.branched {
        config.chain_min.max(3)
    } else {
        config.chain_min
    };
    let len = len_lo + rng.below(config.chain_max - len_lo + 1);
    let center = rng.below(config.toolset_size);
    let gold = if config.branched {
        let dir = if rng.below(2) == 0 { 1 } else { -1 };
        chain_pattern(center, len, dir, config.toolset_size)
    } else {
        unbranched_chain(center, len, config.toolset_size)
    };
    let task = build_task(
        "task-solo".into(),
        DOMAINS[0].into(),
        Split::Train,
        &toolset,
        &unseen,
        gold,
        config.sigma_query,
        rng,
    )?;
    let env = EnvState::new(&task, config.seed, 0.05);
    Ok((task, env))
}

/// Full synthetic dataset: one shared toolset, tasks cycling through
/// splits 70/15/15, chains that avoid unseen tools outside the test split.
pub fn generate_dataset(config: &GenConfig) -> Result<Vec<Task>> {
    config.validate()?;
    let mut rng = SeededRng::labeled(config.seed, "dataset", 0);
    let (toolset, unseen) = sample_circle_toolset(
        config.dim,
        config.toolset_size,
        config.unseen_frac,
        &mut rng,
    )?;
    let n = config.toolset_size;
    let mut tasks = Vec::with_capacity(config.tasks);
    for i in 0..config.tasks {
        let split = match i % 20 {
            0..=13 => Split::Train,
            14..=16 => Split::Dev,
            _ => Split::Test,
        };
        let len_lo = if config.branched {
            config.chain_min.max(3)
        } else {
            config.chain_min
        };
        let len = len_lo + rng.below(config.chain_max - len_lo + 1);
        let dir = if config.branched {
            if rng.below(2) == 0 {
                1
            } else {
                -1
            }
        } else {
            1
        };
        // Non-test chains must avoid unseen tools; resample the center.
        let gold = loop {
            let center = rng.below(n);
            let gold = if config.branched {
                chain_pattern(center, len, dir, n)
            } else {
                unbranched_chain(center, len, n)
            };
            if split == Split::Test || !gold.iter().any(|&t| unseen[t]) {
                break gold;
            }
        };
        tasks.push(build_task(
            format!("task-{i:04}"),
            DOMAINS[i % DOMAINS.len()].into(),
            split,
            &toolset,
            &unseen,
            gold,
            config.sigma_query,
            &mut rng,
        )?);
    }
    Ok(tasks)
}

#[derive(Debug, Serialize, Deserialize)]
struct ToolRecord {
    id: String,
    description: String,
    phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    unseen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskRecord {
    task_id: String,
    domain: String,
    split: String,
    tools: Vec<ToolRecord>,
    gold_workflow: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rationales: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observations: Option<Vec<String>>,
}

fn parse_record(rec: TaskRecord, dim: usize, line: usize) -> Result<(Task, ExpertTrajectory)> {
    let perr = |msg: String| FlowError::Parse { line, msg };
    let split = Split::parse(&rec.split)
        .ok_or_else(|| perr(format!("unknown split '{}'", rec.split)))?;
    if rec.tools.is_empty() {
        return Err(perr("record has no tools".into()));
    }
    let mut tools = Vec::with_capacity(rec.tools.len());
    let mut unseen = Vec::with_capacity(rec.tools.len());
    for t in &rec.tools {
        let embedding = match &t.embedding {
            Some(e) => e.clone(),
            None => crate::semantic::hash_embed(&t.description, dim, DESCRIPTION_SALT)
                .map_err(|e| perr(format!("tool '{}': {e}", t.id)))?,
        };
        tools.push(Tool {
            id: t.id.clone(),
            description: t.description.clone(),
            phase: PhaseTag::parse(&t.phase),
            embedding,
        });
        unseen.push(t.unseen);
    }
    let toolset = Toolset::new(tools).map_err(|e| perr(e.to_string()))?;
    if rec.gold_workflow.is_empty() {
        return Err(perr("empty gold workflow".into()));
    }
    let gold = rec
        .gold_workflow
        .iter()
        .map(|id| {
            toolset.index_of(id).ok_or_else(|| {
                FlowError::Reference(format!(
                    "task '{}': gold workflow names unknown tool '{}'",
                    rec.task_id, id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = gold.len();
    for (name, ann) in [("rationales", &rec.rationales), ("observations", &rec.observations)] {
        if let Some(a) = ann {
            if a.len() != m {
                return Err(perr(format!(
                    "{name} length {} does not match gold workflow length {m}",
                    a.len()
                )));
            }
        }
    }
    let d = toolset.dim();
    let mut mean = vec![0.0; d];
    for &g in &gold {
        for (acc, e) in mean.iter_mut().zip(toolset.embedding(g)) {
            *acc += e;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= m as f64;
    }
    let goal = normalized(&mean)
        .ok_or_else(|| perr("gold chain embeddings cancel to zero".into()))?;
    let query = match rec.query {
        Some(q) => {
            if q.len() != d {
                return Err(perr(format!("query dim {} vs embedding dim {d}", q.len())));
            }
            q
        }
        None => goal.clone(),
    };
    Ok((
        Task {
            id: rec.task_id,
            domain: rec.domain,
            split,
            toolset,
            gold,
            goal,
            query,
            unseen,
        },
        ExpertTrajectory {
            rationales: rec.rationales,
            observations: rec.observations,
        },
    ))
}

/// Loads the trajectory JSONL format. `dim` sets the hash-embedding width
/// for tools that carry no explicit embedding. Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn load_trajectories(path: &Path, dim: usize) -> Result<Vec<(Task, ExpertTrajectory)>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| FlowError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parse_record(rec, dim, i + 1)?);
    }
    Ok(out)
}

/// Serializes tasks back to the JSONL format, one record per line, with
/// explicit embeddings so a round-trip is exact.
pub fn save_trajectories(
    path: &Path,
    items: &[(Task, ExpertTrajectory)],
) -> Result<()> {
    let mut buf = Vec::new();
    for (task, traj) in items {
        let rec = TaskRecord {
            task_id: task.id.clone(),
            domain: task.domain.clone(),
            split: task.split.as_str().into(),
            tools: task
                .toolset
                .tools()
                .iter()
                .zip(&task.unseen)
                .map(|(t, &u)| ToolRecord {
                    id: t.id.clone(),
                    description: t.description.clone(),
                    phase: t.phase.as_str().into(),
                    embedding: Some(t.embedding.clone()),
                    unseen: u,
                })
                .collect(),
            gold_workflow: task
                .gold
                .iter()
                .map(|&g| task.toolset.tool(g).id.clone())
                .collect(),
            query: Some(task.query.clone()),
            rationales: traj.rationales.clone(),
            observations: traj.observations.clone(),
        };
        serde_json::to_writer(&mut buf, &rec)
            .map_err(|e| FlowError::input(format!("serialize: {e}")))?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{DecodeMode, DecodedPlan};
    use crate::flow::{LatentPlan, Trajectory};

    fn small_config() -> GenConfig {
        GenConfig {
            tasks: 40,
            dim: 8,
            toolset_size: 8,
            chain_min: 2,
            chain_max: 5,
            unseen_frac: 0.25,
            sigma_query: 0.01,
            branched: false,
            seed: 5,
        }
    }

    #[test]
    fn dataset_is_deterministic_and_well_formed() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, b);
        for t in &a {
            assert!(!t.gold.is_empty());
            assert!(t.gold.windows(2).all(|w| w[0] != w[1]), "immediate repeat");
            assert!(t.gold.iter().all(|&g| g < t.toolset.len()));
            // Non-test tasks never touch unseen tools.
            if t.split != Split::Test {
                assert!(!t.touches_unseen());
            }
            assert!((norm(&t.goal) - 1.0).abs() < 1e-9);
        }
        // Unseen flag count matches the fraction.
        assert_eq!(a[0].unseen.iter().filter(|&&u| u).count(), 2);
        // All splits are populated.
        for s in [Split::Train, Split::Dev, Split::Test] {
            assert!(a.iter().any(|t| t.split == s), "missing {s:?}");
        }
    }

    #[test]
    fn chain_means_separate_task_identities() {
        // The (center, length) pair must be recoverable from the goal
        // embedding: distinct identities keep a healthy mean-embedding gap.
        let cfg = GenConfig {
            tasks: 200,
            unseen_frac: 0.0,
            ..small_config()
        };
        let tasks = generate_dataset(&cfg).unwrap();
        let mut worst = f64::INFINITY;
        for i in 0..tasks.len() {
            for j in (i + 1)..tasks.len() {
                let same = tasks[i].gold == tasks[j].gold;
                let gap = dist(&tasks[i].goal, &tasks[j].goal);
                if same {
                    assert!(gap < 1e-9);
                } else {
                    worst = worst.min(gap);
                }
            }
        }
        assert!(worst > 0.05, "mean-embedding gap {worst} too small");
    }

    #[test]
    fn single_length_chain_goal_is_the_tool() {
        let cfg = GenConfig {
            chain_min: 1,
            chain_max: 1,
            ..small_config()
        };
        let mut rng = SeededRng::new(3, 0);
        let (task, _) = generate_task(&mut rng, &cfg).unwrap();
        assert_eq!(task.gold.len(), 1);
        assert!(dist(&task.goal, task.toolset.embedding(task.gold[0])) < 1e-9);
    }

    #[test]
    fn generate_task_is_seed_deterministic() {
        let cfg = small_config();
        let mut r1 = SeededRng::new(9, 0);
        let mut r2 = SeededRng::new(9, 0);
        let (t1, _) = generate_task(&mut r1, &cfg).unwrap();
        let (t2, _) = generate_task(&mut r2, &cfg).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn branched_chains_share_queries_across_directions() {
        // The two directions of a branched pattern have identical mean
        // embeddings, so the initial query cannot reveal the branch.
        let n = 8;
        let mut rng = SeededRng::new(11, 0);
        let (toolset, unseen) = sample_circle_toolset(8, n, 0.0, &mut rng).unwrap();
        for len in [3, 4, 5] {
            let plus = chain_pattern(2, len, 1, n);
            let minus = chain_pattern(2, len, -1, n);
            assert_ne!(plus, minus);
            let t_plus = build_task(
                "p".into(),
                "orders".into(),
                Split::Train,
                &toolset,
                &unseen,
                plus,
                0.0,
                &mut rng,
            )
            .unwrap();
            let t_minus = build_task(
                "m".into(),
                "orders".into(),
                Split::Train,
                &toolset,
                &unseen,
                minus,
                0.0,
                &mut rng,
            )
            .unwrap();
            assert!(
                dist(&t_plus.goal, &t_minus.goal) < 1e-9,
                "len {len} leaks direction"
            );
        }
    }

    #[test]
    fn execution_dynamics() {
        let cfg = GenConfig {
            chain_min: 3,
            chain_max: 3,
            ..small_config()
        };
        let mut rng = SeededRng::new(21, 0);
        let (task, _) = generate_task(&mut rng, &cfg).unwrap();
        // Noise-free env to check exact observation vectors.
        let mut env = EnvState::new(&task, 1, 0.0);
        let wrong = (0..task.toolset.len())
            .find(|t| *t != task.gold[0])
            .unwrap();
        let o = env.execute(&task, wrong).unwrap();
        assert_eq!(env.progress(), 0);
        let expect = scale(task.toolset.embedding(wrong), -0.5);
        assert!(dist(&o, &expect) < 1e-12);
        // Same wrong tool again: identical signature, progress still 0.
        let o2 = env.execute(&task, wrong).unwrap();
        assert_eq!(o, o2);
        assert_eq!(env.progress(), 0);
        // Correct tool embeds half the next gold tool.
        let o = env.execute(&task, task.gold[0]).unwrap();
        assert_eq!(env.progress(), 1);
        let mut expect = task.toolset.embedding(task.gold[0]).to_vec();
        for (e, n) in expect.iter_mut().zip(task.toolset.embedding(task.gold[1])) {
            *e += 0.5 * n;
        }
        assert!(dist(&o, &expect) < 1e-12);
        // Finishing the chain: the last observation has no next-tool bonus.
        env.execute(&task, task.gold[1]).unwrap();
        let o = env.execute(&task, task.gold[2]).unwrap();
        assert!(env.completed(&task));
        let last = task.toolset.embedding(task.gold[2]);
        assert!(dist(&o, last) < 1e-12);
        // Unknown tool index is an input error.
        assert!(env.execute(&task, 99).is_err());
    }

    #[test]
    fn context_update_contracts() {
        let d = 8;
        let nets = ContextNets::frozen_init(d, 0.7, 4).unwrap();
        let cfg = small_config();
        let mut rng = SeededRng::new(31, 0);
        let (task, _) = generate_task(&mut rng, &cfg).unwrap();
        let ratio = contraction_estimate(&nets, &task.toolset, 1000, &mut rng).unwrap();
        assert!(ratio <= 0.7 + 1e-9, "ratio {ratio}");
        assert!(ratio > 0.5, "identity carry should be near rho, got {ratio}");

        // rho = 0 forgets the context entirely.
        let memoryless = ContextNets::frozen_init(d, 0.0, 4).unwrap();
        let ratio = contraction_estimate(&memoryless, &task.toolset, 100, &mut rng).unwrap();
        assert!(ratio < 1e-12);

        // Record bookkeeping.
        let ctx = initial_context(&task);
        assert_eq!(ctx.phase, 1);
        let o = vec![0.1; d];
        let next = update_context(&nets, &ctx, task.gold[0], &task.toolset, &o, None).unwrap();
        assert_eq!(next.phase, 2);
        assert_eq!(next.record.len(), 1);
        assert_eq!(next.record[0].tool, task.gold[0]);
    }

    #[test]
    fn unnormalized_identity_at_rho_one_is_flagged_boundary() {
        // Constructing the carry map directly with rho = 1 and identity W_u
        // shows the assumption violation the estimate is meant to catch.
        let d = 4;
        let mut rng = SeededRng::new(41, 0);
        let nets = ContextNets {
            w_update: DenseNet::identity_linear(d).unwrap(),
            w_input: DenseNet::random(&[2 * d, d], &[Activation::Tanh], 1.0, &mut rng).unwrap(),
            obs_enc: DenseNet::mlp(d, &[8], d, 1.0, &mut rng).unwrap(),
            rho: 1.0,
            dim: d,
        };
        let ts = {
            let cfg = GenConfig {
                dim: d,
                ..small_config()
            };
            generate_task(&mut rng, &cfg).unwrap().0.toolset
        };
        let ratio = contraction_estimate(&nets, &ts, 200, &mut rng).unwrap();
        assert!((ratio - 1.0).abs() < 1e-9, "expected ratio 1, got {ratio}");
    }

    #[test]
    fn replay_progress_matches_env() {
        let cfg = small_config();
        let mut rng = SeededRng::new(51, 0);
        let (task, _) = generate_task(&mut rng, &cfg).unwrap();
        let mut env = EnvState::new(&task, 2, 0.05);
        let nets = ContextNets::frozen_init(cfg.dim, 0.7, 4).unwrap();
        let mut ctx = initial_context(&task);
        // Interleave a wrong call with gold calls.
        let wrong = (0..task.toolset.len())
            .find(|t| *t != task.gold[0])
            .unwrap();
        for tool in [task.gold[0], wrong, task.gold[1]] {
            let o = env.execute(&task, tool).unwrap();
            ctx = update_context(&nets, &ctx, tool, &task.toolset, &o, None).unwrap();
        }
        assert_eq!(replay_progress(&task, &ctx.record), 2);
        assert_eq!(env.progress(), 2);
    }

    fn fixed_plan(anchors: Vec<Vec<f64>>, tools: Vec<usize>) -> (LatentPlan, DecodedPlan) {
        let n = anchors.len();
        let plan = LatentPlan {
            z0: anchors[0].clone(),
            trajectory: Trajectory {
                states: anchors.clone(),
            },
            anchors,
            anchor_times: crate::supervision::knot_times(n, 0.3),
        };
        let stop_probs = vec![0.0; tools.len()];
        let decoded = DecodedPlan {
            tools,
            stop_probs,
            stopped_at: None,
            mode: DecodeMode::Map,
        };
        (plan, decoded)
    }

    #[test]
    fn utility_components() {
        let cfg = GenConfig {
            chain_min: 2,
            chain_max: 2,
            ..small_config()
        };
        let mut rng = SeededRng::new(61, 0);
        let (task, _) = generate_task(&mut rng, &cfg).unwrap();
        let ctx = initial_context(&task);
        let w_c = DenseNet::identity_linear(cfg.dim).unwrap();
        let d = cfg.dim;

        // Decoded equals the remaining gold chain, all lambdas zero.
        let anchors = vec![vec![0.0; d]; 2];
        let (plan, decoded) = fixed_plan(anchors, task.gold.clone());
        let zero = UtilityParams {
            lambda_cost: 0.0,
            lambda_red: 0.0,
            lambda_cons: 0.0,
            l_max: 8,
        };
        let u = utility(&plan, &decoded, &task, &ctx, &w_c, &zero).unwrap();
        assert_eq!(u.acc, 1.0);
        assert_eq!(u.value, 1.0);

        // (A, A) against gold (A, B): Acc 0.5, Red 0.5.
        let (plan, decoded) = fixed_plan(vec![vec![0.0; d]; 2], vec![task.gold[0], task.gold[0]]);
        let u = utility(&plan, &decoded, &task, &ctx, &w_c, &zero).unwrap();
        assert_eq!(u.acc, 0.5);
        assert_eq!(u.red, 0.5);

        // Empty decoded plan with work remaining.
        let (plan, decoded) = fixed_plan(vec![vec![0.0; d]], vec![]);
        let u = utility(&plan, &decoded, &task, &ctx, &w_c, &zero).unwrap();
        assert_eq!(u.acc, 0.0);
        assert_eq!(u.cost, 0.0);
        assert_eq!(u.red, 0.0);

        // Cons is 1 when anchors sit exactly on the projected context.
        let target = w_c.apply(&ctx.vector).unwrap();
        let (plan, decoded) = fixed_plan(vec![target.clone(), target], task.gold.clone());
        let params = UtilityParams::default();
        let u = utility(&plan, &decoded, &task, &ctx, &w_c, &params).unwrap();
        assert!((u.cons - 1.0).abs() < 1e-12);
        // Identity recomputes exactly.
        let again = u.acc - params.lambda_cost * u.cost - params.lambda_red * u.red
            + params.lambda_cons * u.cons;
        assert_eq!(u.value, again);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let cfg = small_config();
        let tasks = generate_dataset(&cfg).unwrap();
        let items: Vec<(Task, ExpertTrajectory)> = tasks
            .into_iter()
            .map(|t| (t, ExpertTrajectory::default()))
            .collect();
        save_trajectories(&path, &items).unwrap();
        let loaded = load_trajectories(&path, cfg.dim).unwrap();
        assert_eq!(loaded.len(), items.len());
        for ((t0, _), (t1, _)) in items.iter().zip(&loaded) {
            assert_eq!(t0, t1);
        }
        // Re-serialize: byte-identical file.
        let path2 = dir.path().join("tasks2.jsonl");
        save_trajectories(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );

        // Empty file loads to an empty list.
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_trajectories(&empty, 8).unwrap().is_empty());

        // Malformed line reports its 1-based number.
        let bad = dir.path().join("bad.jsonl");
        let good_line = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        std::fs::write(&bad, format!("{good_line}\nnot json\n")).unwrap();
        match load_trajectories(&bad, 8) {
            Err(FlowError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Dangling gold tool names the offender.
        let dangling = dir.path().join("dangling.jsonl");
        std::fs::write(
            &dangling,
            r#"{"task_id":"t","domain":"orders","split":"train","tools":[{"id":"a","description":"look up order records","phase":"retrieval"},{"id":"b","description":"cancel invoice records","phase":"other"}],"gold_workflow":["a","ghost"]}"#,
        )
        .unwrap();
        match load_trajectories(&dangling, 8) {
            Err(FlowError::Reference(msg)) => assert!(msg.contains("ghost"), "{msg}"),
            other => panic!("expected reference error, got {other:?}"),
        }

        // Text-only tools hash-embed and load.
        let text_only = dir.path().join("text.jsonl");
        std::fs::write(
            &text_only,
            r#"{"task_id":"t2","domain":"billing","split":"dev","tools":[{"id":"a","description":"look up order records","phase":"retrieval"},{"id":"b","description":"cancel invoice records","phase":"other"}],"gold_workflow":["a","b"],"rationales":["find it","close it"],"observations":["found","done"]}"#,
        )
        .unwrap();
        let loaded = load_trajectories(&text_only, 8).unwrap();
        assert_eq!(loaded.len(), 1);
        let (task, traj) = &loaded[0];
        assert_eq!(task.gold, vec![0, 1]);
        assert_eq!(task.toolset.dim(), 8);
        assert_eq!(traj.rationales.as_ref().unwrap().len(), 2);

        // Mismatched annotation length is a parse error.
        let mismatch = dir.path().join("mismatch.jsonl");
        std::fs::write(
            &mismatch,
            r#"{"task_id":"t3","domain":"billing","split":"dev","tools":[{"id":"a","description":"look up order records","phase":"retrieval"},{"id":"b","description":"cancel invoice records","phase":"other"}],"gold_workflow":["a","b"],"rationales":["only one"]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_trajectories(&mismatch, 8),
            Err(FlowError::Parse { line: 1, .. })
        ));
    }
}
