//! Three-stage training: continuous path imitation, anchor decoding, and
//! utility-weighted plan refinement, with a consistency regularizer active
//! throughout.
//!
//! Stage 1 regresses the velocity field onto the teacher field of each
//! instance's target path. Stage 2 adds tool and stop cross-entropy at the
//! anchors of trajectories integrated under the current field, with
//! gradients pushed back through the integrator. Stage 3 adds reward-
//! weighted distillation toward high-utility candidate plans drawn from a
//! frozen snapshot. Stages are cumulative; all sampling is seeded, so a
//! run is a pure function of (config, data).

use crate::decoding::{decode_plan, tool_cross_entropy, DecodeMode, StopHead};
use crate::environment::{
    initial_context, update_context, utility, ContextNets, ContextState, EnvState,
    ExpertTrajectory, Split, Task, UtilityParams,
};
use crate::error::{FlowError, Result};
use crate::executor::run_closed_loop;
use crate::flow::{
    anchor_node_grads, backprop_trajectory, extract_anchors, integrate_with_tape, plan_from,
    IntegrationMethod, VelocityModel,
};
use crate::metrics::score_episode;
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint, TensorEntry};
use crate::numerics::net::{DenseNet, GradientTape};
use crate::numerics::optim::OptimState;
use crate::numerics::rng::SeededRng;
use crate::numerics::vec::{all_finite, axpy, dist, dist_sq};
use crate::supervision::{SupervisionHeads, TargetPath};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Every knob of the pipeline. Deserializable from a JSON config file;
/// missing fields take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Latent dimension d; also the context width.
    pub dim: usize,
    /// Integration steps per unit planning time.
    pub steps: usize,
    /// Hidden widths of the velocity net.
    pub hidden: Vec<usize>,
    pub stop_hidden: usize,
    /// Hidden width of the context-to-latent projection.
    pub wc_hidden: usize,
    pub init_scale: f64,
    /// Teacher pull rate toward the target path.
    pub kappa_pull: f64,
    /// Radius of the sampling tube around the target path.
    pub sigma_tube: f64,
    /// Fraction of flow-matching draws taken on funnel trajectories that
    /// start at the prior instead of inside the tube.
    pub funnel_frac: f64,
    /// Prior width around the projected context at the start of planning
    /// time. Sampled plans draw z0 this far from the projection; greedy
    /// plans start exactly on it.
    pub sigma0: f64,
    /// Decoding temperature.
    pub epsilon: f64,
    pub theta_stop: f64,
    /// Context update carry ratio.
    pub rho: f64,
    /// Decode loss weight.
    pub lambda1: f64,
    /// Plan refinement loss weight.
    pub lambda2: f64,
    /// Consistency loss weight.
    pub lambda3: f64,
    pub utility: UtilityParams,
    /// Candidate plans per refinement step.
    pub candidates: usize,
    /// Flow-matching draws per trajectory per integration step.
    pub mc_draws: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub lr_imitate: f64,
    pub lr_refine: f64,
    pub seed: u64,
    /// Observation noise during teacher forcing.
    pub sigma_obs: f64,
    /// Where stage checkpoints land; in-memory only when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 16,
            steps: 32,
            hidden: vec![64, 64],
            stop_hidden: 32,
            wc_hidden: 32,
            init_scale: 0.3,
            kappa_pull: 4.0,
            sigma_tube: 0.1,
            funnel_frac: 0.5,
            sigma0: 0.5,
            epsilon: 0.1,
            theta_stop: 0.5,
            rho: 0.7,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            utility: UtilityParams::default(),
            candidates: 8,
            mc_draws: 8,
            stage1_epochs: 8,
            stage2_epochs: 16,
            stage3_epochs: 5,
            lr_imitate: 1e-3,
            lr_refine: 3e-4,
            seed: 17,
            sigma_obs: 0.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(FlowError::Config("dim must be at least 2".into()));
        }
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be positive".into()));
        }
        if self.stop_hidden == 0 || self.wc_hidden == 0 {
            return Err(FlowError::Config("head widths must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(FlowError::Config("epsilon must be positive".into()));
        }
        if self.kappa_pull <= 0.0 {
            return Err(FlowError::Config("kappa_pull must be positive".into()));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_cost", self.utility.lambda_cost),
            ("lambda_red", self.utility.lambda_red),
            ("lambda_cons", self.utility.lambda_cons),
        ] {
            if l < 0.0 {
                return Err(FlowError::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.candidates < 2 {
            return Err(FlowError::Config("need at least 2 candidates".into()));
        }
        if self.mc_draws == 0 {
            return Err(FlowError::Config("mc_draws must be positive".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return Err(FlowError::Config("sigma0 must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.funnel_frac) {
            return Err(FlowError::Config("funnel_frac outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(FlowError::Config("rho outside [0, 1)".into()));
        }
        if self.theta_stop <= 0.0 || self.theta_stop >= 1.0 {
            return Err(FlowError::Config("theta_stop outside (0, 1)".into()));
        }
        if self.lr_imitate <= 0.0 || self.lr_refine <= 0.0 {
            return Err(FlowError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects the learned parameters. The
    /// checkpoint directory is excluded: where a model is written does not
    /// change what it is.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.checkpoint_dir = None;
        let json = serde_json::to_string(&semantic).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Every learned and frozen component of the planner.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub velocity: VelocityModel,
    pub heads: SupervisionHeads,
    pub stop: StopHead,
    /// Projection from context space to latent space for consistency and
    /// the utility's consistency term.
    pub w_c: DenseNet,
    pub context: ContextNets,
    pub config: TrainConfig,
}

impl ModelBundle {
    /// Fresh bundle: random velocity and stop nets, frozen heads and
    /// context nets, identity context projection.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = SeededRng::labeled(config.seed, "bundle-init", 0);
        let velocity = VelocityModel::new(
            d,
            d,
            &config.hidden,
            config.init_scale,
            config.kappa_pull,
            &mut rng,
        )?;
        let stop = StopHead::new(d, config.stop_hidden, 0.3, &mut rng)?;
        Ok(ModelBundle {
            velocity,
            heads: SupervisionHeads::frozen_init(d, config.seed)?,
            stop,
            w_c: DenseNet::identity_linear(d)?,
            context: ContextNets::frozen_init(d, config.rho, config.seed)?,
            config: config.clone(),
        })
    }

    fn trained_tensors(&self) -> Result<Vec<TensorEntry>> {
        Ok(vec![
            TensorEntry::new(
                "velocity",
                vec![self.velocity.net.param_count()],
                self.velocity.net.flatten_params(),
            )?,
            TensorEntry::new(
                "stop",
                vec![self.stop.net.param_count()],
                self.stop.net.flatten_params(),
            )?,
            TensorEntry::new(
                "w_c",
                vec![self.w_c.param_count()],
                self.w_c.flatten_params(),
            )?,
        ])
    }

    /// Writes `<name>.ckpt` plus `config.json` into `dir`. Frozen nets are
    /// not stored; they are a deterministic function of the config.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let config_json = serde_json::to_vec_pretty(&self.config)
            .map_err(|e| FlowError::input(format!("config serialization: {e}")))?;
        let tmp = dir.join("config.json.tmp-write");
        std::fs::write(&tmp, &config_json)?;
        std::fs::rename(&tmp, dir.join("config.json"))?;
        save_checkpoint(
            &dir.join(format!("{name}.ckpt")),
            self.config.seed,
            &self.config.hash(),
            &self.trained_tensors()?,
        )
    }

    /// Loads `<name>.ckpt` written by `save`, rebuilding the frozen parts
    /// from the stored config and verifying the config hash.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let config_bytes = std::fs::read(dir.join("config.json"))?;
        let config: TrainConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| FlowError::Parse {
                line: 1,
                msg: format!("train config: {e}"),
            })?;
        let mut bundle = ModelBundle::init(&config)?;
        let (header, tensors) = load_checkpoint(&dir.join(format!("{name}.ckpt")))?;
        if header.config_hash != config.hash() {
            return Err(FlowError::input(format!(
                "checkpoint hash {} does not match config hash {}",
                header.config_hash,
                config.hash()
            )));
        }
        for t in &tensors {
            match t.name.as_str() {
                "velocity" => bundle.velocity.net.load_params(&t.data)?,
                "stop" => bundle.stop.net.load_params(&t.data)?,
                "w_c" => bundle.w_c.load_params(&t.data)?,
                other => {
                    return Err(FlowError::input(format!("unknown tensor '{other}'")));
                }
            }
        }
        Ok(bundle)
    }
}

/// One teacher-forced training unit: the context at some phase of a task
/// plus the target path covering the tools still to come and the final
/// pull to the origin stop zone.
#[derive(Debug, Clone)]
pub struct Instance {
    pub task_idx: usize,
    /// 1-based phase; phase m+1 is the completed state whose whole path is
    /// the stop zone.
    pub phase: usize,
    pub context: ContextState,
    pub remaining: Vec<usize>,
    pub path: TargetPath,
}

impl Instance {
    /// Anchor count: one per remaining tool plus the stop anchor.
    pub fn anchor_count(&self) -> usize {
        self.remaining.len() + 1
    }
}

/// Builds teacher-forced instances for every task of `split`, replaying
/// gold tools against the environment to produce each phase's context.
pub fn build_instances(
    bundle: &ModelBundle,
    data: &[(Task, ExpertTrajectory)],
    split: Split,
    env_seed: u64,
) -> Result<Vec<Instance>> {
    let cfg = &bundle.config;
    let mut out = Vec::new();
    for (task_idx, (task, traj)) in data.iter().enumerate() {
        if task.split != split {
            continue;
        }
        if task.toolset.dim() != cfg.dim {
            return Err(FlowError::shape(format!(
                "task '{}' has embedding dim {}, config expects {}",
                task.id,
                task.toolset.dim(),
                cfg.dim
            )));
        }
        let m = task.gold.len();
        let mut env = EnvState::new(task, env_seed, cfg.sigma_obs);
        let mut ctx = initial_context(task);
        for phase in 1..=m + 1 {
            let remaining: Vec<usize> = task.gold[phase - 1..].to_vec();
            let mut knots = Vec::with_capacity(remaining.len() + 1);
            for (j, &g) in remaining.iter().enumerate() {
                let step = phase - 1 + j;
                let rationale = traj.rationales.as_ref().map(|r| r[step].as_str());
                let observation = traj.observations.as_ref().map(|o| o[step].as_str());
                knots.push(bundle.heads.encode_step(
                    task.toolset.embedding(g),
                    rationale,
                    observation,
                    task.toolset.tool(g).phase,
                )?);
            }
            knots.push(vec![0.0; cfg.dim]);
            out.push(Instance {
                task_idx,
                phase,
                context: ctx.clone(),
                remaining,
                path: TargetPath::new(knots, cfg.burn_in, cfg.kappa_pull)?,
            });
            if phase <= m {
                let gold = task.gold[phase - 1];
                let o = env.execute(task, gold)?;
                let rationale = traj
                    .rationales
                    .as_ref()
                    .map(|r| r[phase - 1].clone());
                ctx = update_context(&bundle.context, &ctx, gold, &task.toolset, &o, rationale)?;
            }
        }
    }
    Ok(out)
}

/// Monte-Carlo flow-matching loss for one instance, with parameter grads
/// accumulated into `tape`. Draws mix tube samples around the path with
/// funnel samples that replay prior draws collapsing onto it.
pub fn loss_flow_matching(
    bundle: &ModelBundle,
    inst: &Instance,
    rng: &mut SeededRng,
    tape: &mut GradientTape,
) -> Result<f64> {
    let cfg = &bundle.config;
    let steps = cfg.steps;
    let draws = cfg.mc_draws;
    let norm = 1.0 / (steps * draws) as f64;
    let mut loss = 0.0;
    for k in 0..steps {
        let s = k as f64 / steps as f64;
        for _ in 0..draws {
            let z = if rng.uniform() < cfg.funnel_frac {
                inst.path.sample_funnel(s, rng)
            } else {
                inst.path.sample_tube(s, cfg.sigma_tube, rng)
            };
            let target = inst.path.teacher_velocity(&z, s)?;
            let input = bundle.velocity.assemble(&z, s, &inst.context.vector);
            let v = bundle.velocity.eval_assembled(&input)?;
            let mut upstream = vec![0.0; v.len()];
            for i in 0..v.len() {
                let r = v[i] - target[i];
                loss += norm * r * r;
                // Chain through v = pull * (net - z).
                upstream[i] = 2.0 * r * bundle.velocity.pull;
            }
            bundle.velocity.net.backprop_acc(&input, &upstream, tape, norm)?;
        }
    }
    if !loss.is_finite() {
        return Err(FlowError::numeric("flow-matching loss diverged"));
    }
    Ok(loss)
}

/// Tool and stop cross-entropy over the anchors of one integrated plan.
///
/// Anchors 1..R carry the remaining gold tools; every anchor carries a
/// stop target, 1 exactly at the post-final anchor. Anchor-space grads are
/// scaled by `scale` and added to `anchor_grads`; stop-net grads land in
/// `stop_tape` unscaled.
pub fn loss_decode(
    bundle: &ModelBundle,
    inst: &Instance,
    task: &Task,
    anchors: &[Vec<f64>],
    scale: f64,
    anchor_grads: &mut [Vec<f64>],
    stop_tape: &mut GradientTape,
) -> Result<f64> {
    let len = anchors.len();
    if len != inst.anchor_count() || anchor_grads.len() != len {
        return Err(FlowError::shape(format!(
            "expected {} anchors, got {}",
            inst.anchor_count(),
            len
        )));
    }
    let mut loss = 0.0;
    for (l, &gold) in inst.remaining.iter().enumerate() {
        let (ce, g) = tool_cross_entropy(&anchors[l], &task.toolset, gold, bundle.config.epsilon)?;
        loss += ce;
        axpy(&mut anchor_grads[l], scale, &g);
    }
    for (l, anchor) in anchors.iter().enumerate() {
        let target = if l + 1 == len { 1.0 } else { 0.0 };
        let (bce, gz, _gc) =
            bundle
                .stop
                .bce_with_grads(anchor, &inst.context.vector, target, stop_tape)?;
        loss += bce;
        axpy(&mut anchor_grads[l], scale, &gz);
    }
    Ok(loss)
}

/// Mean squared distance from the anchors to the projected context, with
/// grads scaled by `scale` into `anchor_grads` and the projection's tape.
pub fn loss_consistency(
    anchors: &[Vec<f64>],
    context_vec: &[f64],
    w_c: &DenseNet,
    scale: f64,
    anchor_grads: &mut [Vec<f64>],
    wc_tape: &mut GradientTape,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(FlowError::input("consistency needs at least one anchor"));
    }
    let target = w_c.apply(context_vec)?;
    let d = target.len();
    let inv = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let mut target_up = vec![0.0; d];
    for (anchor, grad) in anchors.iter().zip(anchor_grads.iter_mut()) {
        for i in 0..d {
            let diff = anchor[i] - target[i];
            loss += inv * diff * diff;
            grad[i] += scale * 2.0 * inv * diff;
            target_up[i] -= 2.0 * inv * diff;
        }
    }
    w_c.backprop_acc(context_vec, &target_up, wc_tape, scale)?;
    Ok(loss)
}

/// Self-normalized weights exp(U_k) / sum over the batch of utilities.
pub fn softmax_weights(utilities: &[f64]) -> Vec<f64> {
    let hi = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|u| (u - hi).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One refinement candidate: the stored prior draw, the anchors it reached
/// under the snapshot field, and its utility weight.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub z0: Vec<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub utility: f64,
    pub weight: f64,
}

/// Samples refinement candidates for one instance from a frozen snapshot
/// of the velocity field, scoring each with the plan utility under sampled
/// decoding.
pub fn sample_candidates(
    bundle: &ModelBundle,
    snapshot: &VelocityModel,
    inst: &Instance,
    task: &Task,
    rng: &mut SeededRng,
) -> Result<Vec<Candidate>> {
    let cfg = &bundle.config;
    let count = cfg.candidates;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let z0 = rng.normal_vec(cfg.dim);
        let plan = plan_from(
            snapshot,
            z0.clone(),
            &inst.context.vector,
            cfg.steps,
            IntegrationMethod::RungeKutta4,
            inst.anchor_count(),
            cfg.burn_in,
        )?;
        let decoded = decode_plan(
            &plan,
            &task.toolset,
            cfg.epsilon,
            &bundle.stop,
            cfg.theta_stop,
            &inst.context.vector,
            DecodeMode::Sampled,
            rng,
        )?;
        let score = utility(&plan, &decoded, task, &inst.context, &bundle.w_c, &cfg.utility)?;
        raw.push((z0, plan.anchors, score.value));
    }
    let weights = softmax_weights(&raw.iter().map(|r| r.2).collect::<Vec<_>>());
    Ok(raw
        .into_iter()
        .zip(weights)
        .map(|((z0, anchors, utility), weight)| Candidate {
            z0,
            anchors,
            utility,
            weight,
        })
        .collect())
}

/// Reward-weighted distillation: re-integrates each candidate's stored
/// prior draw under the current field and pulls the resulting anchors
/// toward the candidate's anchors, weighted by utility.
pub fn loss_plan_refine(
    bundle: &ModelBundle,
    inst: &Instance,
    candidates: &[Candidate],
    scale: f64,
    velocity_tape: &mut GradientTape,
) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(FlowError::input("refinement needs at least 2 candidates"));
    }
    let cfg = &bundle.config;
    let d = cfg.dim;
    let count = inst.anchor_count();
    let mut loss = 0.0;
    for cand in candidates {
        let (traj, tape) = integrate_with_tape(
            &bundle.velocity,
            &cand.z0,
            &inst.context.vector,
            cfg.steps,
            IntegrationMethod::RungeKutta4,
        )?;
        let current = extract_anchors(&traj, count, cfg.burn_in);
        let mut anchor_grads = vec![vec![0.0; d]; count];
        for l in 0..count {
            loss += cand.weight * dist_sq(&current[l], &cand.anchors[l]);
            for i in 0..d {
                anchor_grads[l][i] =
                    scale * cand.weight * 2.0 * (current[l][i] - cand.anchors[l][i]);
            }
        }
        let node_grads = anchor_node_grads(cfg.steps, d, cfg.burn_in, &anchor_grads);
        let (tape_v, _, _) = backprop_trajectory(&bundle.velocity, &tape, &node_grads)?;
        velocity_tape.add_scaled(&tape_v, 1.0);
    }
    Ok(loss)
}

/// The weighted total of Stage 3.
pub fn total_loss(components: &LossComponents, lambda1: f64, lambda2: f64, lambda3: f64) -> f64 {
    components.flow
        + lambda1 * components.decode
        + lambda2 * components.plan
        + lambda3 * components.consistency
}

/// Per-loss breakdown of one step or one epoch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub flow: f64,
    pub decode: f64,
    pub plan: f64,
    pub consistency: f64,
}

/// Gradient accumulators for the three trained nets.
pub struct LossGrads {
    pub velocity: GradientTape,
    pub stop: GradientTape,
    pub w_c: GradientTape,
}

impl LossGrads {
    pub fn new(bundle: &ModelBundle) -> Self {
        LossGrads {
            velocity: GradientTape::zeros_like(&bundle.velocity.net),
            stop: GradientTape::zeros_like(&bundle.stop.net),
            w_c: GradientTape::zeros_like(&bundle.w_c),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.velocity.is_finite() && self.stop.is_finite() && self.w_c.is_finite()
    }
}

/// Full loss and gradients for one instance at the given stage. Stage 1 is
/// flow matching plus consistency; stage 2 adds decoding; stage 3 adds
/// refinement against `candidates`.
pub fn instance_step(
    bundle: &ModelBundle,
    inst: &Instance,
    task: &Task,
    stage: usize,
    candidates: Option<&[Candidate]>,
    rng: &mut SeededRng,
) -> Result<(LossComponents, LossGrads)> {
    let cfg = &bundle.config;
    let d = cfg.dim;
    let mut grads = LossGrads::new(bundle);
    let mut components = LossComponents::default();

    components.flow = loss_flow_matching(bundle, inst, rng, &mut grads.velocity)?;

    let z0 = rng.normal_vec(d);
    let (traj, tape) = integrate_with_tape(
        &bundle.velocity,
        &z0,
        &inst.context.vector,
        cfg.steps,
        IntegrationMethod::RungeKutta4,
    )?;
    let anchors = extract_anchors(&traj, inst.anchor_count(), cfg.burn_in);
    let mut anchor_grads = vec![vec![0.0; d]; anchors.len()];

    if stage >= 2 {
        let mut stop_tape = GradientTape::zeros_like(&bundle.stop.net);
        components.decode = loss_decode(
            bundle,
            inst,
            task,
            &anchors,
            cfg.lambda1,
            &mut anchor_grads,
            &mut stop_tape,
        )?;
        grads.stop.add_scaled(&stop_tape, cfg.lambda1);
    }

    components.consistency = loss_consistency(
        &anchors,
        &inst.context.vector,
        &bundle.w_c,
        cfg.lambda3,
        &mut anchor_grads,
        &mut grads.w_c,
    )?;

    let node_grads = anchor_node_grads(cfg.steps, d, cfg.burn_in, &anchor_grads);
    let (tape_v, _, _) = backprop_trajectory(&bundle.velocity, &tape, &node_grads)?;
    grads.velocity.add_scaled(&tape_v, 1.0);

    if stage >= 3 {
        if let Some(cands) = candidates {
            components.plan =
                loss_plan_refine(bundle, inst, cands, cfg.lambda2, &mut grads.velocity)?;
        }
    }

    Ok((components, grads))
}

/// One history row; the candidate-utility column is only populated during
/// stage 3.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: usize,
    pub loss_flow: f64,
    pub loss_decode: f64,
    pub loss_plan: f64,
    pub loss_consistency: f64,
    pub loss_total: f64,
    pub anchor_rms: f64,
    pub dev_tool_em: f64,
    pub candidate_utility: Option<f64>,
}

/// Training trace: per-epoch rows plus wall-clock per stage. Wall times
/// stay in memory; the CSV holds only run-deterministic columns.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub stage_wall_ms: [u128; 3],
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,stage,loss_flow,loss_decode,loss_plan,loss_consistency,loss_total,anchor_rms,dev_tool_em,candidate_utility\n",
        );
        for r in &self.rows {
            let cand = r
                .candidate_utility
                .map(|u| format!("{u}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.stage,
                r.loss_flow,
                r.loss_decode,
                r.loss_plan,
                r.loss_consistency,
                r.loss_total,
                r.anchor_rms,
                r.dev_tool_em,
                cand
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        std::fs::write(&tmp, self.to_csv())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Dev-split quality snapshot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DevReport {
    /// Root mean squared anchor-to-knot distance over all dev anchors.
    pub anchor_rms: f64,
    /// Fraction of tool anchors within half their knot's linear decoding
    /// margin, the radius that guarantees correct MAP decoding.
    pub within_half_margin: f64,
    /// Closed-loop MAP Tool EM (action rows plus stop rows).
    pub tool_em: f64,
}

const EVAL_ENV_SALT: u64 = 0x4556_414c;

/// Teacher-forced anchor accuracy plus closed-loop MAP Tool EM on `split`.
pub fn evaluate_split(
    bundle: &ModelBundle,
    data: &[(Task, ExpertTrajectory)],
    split: Split,
) -> Result<DevReport> {
    let cfg = &bundle.config;
    let eval_seed = cfg.seed ^ EVAL_ENV_SALT;
    let instances = build_instances(bundle, data, split, eval_seed)?;
    if instances.is_empty() {
        return Err(FlowError::input(format!(
            "no {} tasks to evaluate",
            split.as_str()
        )));
    }
    let mut sq_sum = 0.0;
    let mut anchor_count = 0usize;
    let mut tool_anchors = 0usize;
    let mut within = 0usize;
    for (i, inst) in instances.iter().enumerate() {
        let task = &data[inst.task_idx].0;
        let mut rng = SeededRng::labeled(eval_seed, "eval-anchor", i as u64);
        let z0 = rng.normal_vec(cfg.dim);
        let plan = plan_from(
            &bundle.velocity,
            z0,
            &inst.context.vector,
            cfg.steps,
            IntegrationMethod::RungeKutta4,
            inst.anchor_count(),
            cfg.burn_in,
        )?;
        for (l, knot) in inst.path.knots().iter().enumerate() {
            let err = dist(&plan.anchors[l], knot);
            sq_sum += err * err;
            anchor_count += 1;
            if l < inst.remaining.len() {
                let (_, linear) = task.toolset.decoding_margin(knot, inst.remaining[l])?;
                tool_anchors += 1;
                if err < linear / 2.0 {
                    within += 1;
                }
            }
        }
    }
    let mut row_correct = 0usize;
    let mut row_total = 0usize;
    for (task, _) in data.iter().filter(|(t, _)| t.split == split) {
        let mut rng = SeededRng::labeled(eval_seed, "eval-episode", crate::numerics::rng::hash_str(&task.id));
        let episode = run_closed_loop(
            bundle,
            task,
            eval_seed,
            cfg.sigma_obs,
            DecodeMode::Map,
            2 * task.gold.len() + 2,
            &mut rng,
        )?;
        let score = score_episode(&episode, task);
        row_correct += score.correct_rows();
        row_total += score.total_rows();
    }
    Ok(DevReport {
        anchor_rms: (sq_sum / anchor_count.max(1) as f64).sqrt(),
        within_half_margin: if tool_anchors == 0 {
            1.0
        } else {
            within as f64 / tool_anchors as f64
        },
        tool_em: if row_total == 0 {
            0.0
        } else {
            row_correct as f64 / row_total as f64
        },
    })
}

/// Mean utility of freshly sampled candidate plans over the phase-1
/// instances, under a fixed evaluation stream. Used to track refinement
/// progress across stage-3 epochs.
pub fn mean_candidate_utility(
    bundle: &ModelBundle,
    instances: &[Instance],
    data: &[(Task, ExpertTrajectory)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, inst) in instances.iter().enumerate().filter(|(_, i)| i.phase == 1) {
        let task = &data[inst.task_idx].0;
        let mut rng = SeededRng::labeled(bundle.config.seed, "refine-eval", i as u64);
        let cands = sample_candidates(bundle, &bundle.velocity, inst, task, &mut rng)?;
        total += cands.iter().map(|c| c.utility).sum::<f64>();
        n += cands.len();
    }
    if n == 0 {
        return Err(FlowError::input("no phase-1 instances to score"));
    }
    Ok(total / n as f64)
}

/// Runs the three-stage pipeline. Checkpoints land in
/// `config.checkpoint_dir` when set (`stage1..stage3` plus final `model`);
/// a numeric abort leaves the last completed stage's checkpoint behind.
pub fn train(
    config: &TrainConfig,
    data: &[(Task, ExpertTrajectory)],
) -> Result<(ModelBundle, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(FlowError::input("training data is empty"));
    }
    let mut bundle = ModelBundle::init(config)?;
    let instances = build_instances(&bundle, data, Split::Train, config.seed)?;
    if instances.is_empty() {
        return Err(FlowError::input("no train-split tasks in the dataset"));
    }
    let has_dev = data.iter().any(|(t, _)| t.split == Split::Dev);
    let eval_split = if has_dev { Split::Dev } else { Split::Train };

    let mut history = TrainHistory::default();
    let mut global_epoch = 0usize;
    for stage in 1..=3usize {
        let started = std::time::Instant::now();
        let epochs = match stage {
            1 => config.stage1_epochs,
            2 => config.stage2_epochs,
            _ => config.stage3_epochs,
        };
        let lr = if stage == 3 {
            config.lr_refine
        } else {
            config.lr_imitate
        };
        let mut opt_velocity = OptimState::new(&bundle.velocity.net, lr);
        let mut opt_stop = OptimState::new(&bundle.stop.net, lr);
        let mut opt_wc = OptimState::new(&bundle.w_c, lr);
        for _ in 0..epochs {
            global_epoch += 1;
            let mut rng = SeededRng::labeled(config.seed, "train-epoch", global_epoch as u64);
            let refine: Option<Vec<Option<Vec<Candidate>>>> = if stage == 3 {
                let snapshot = bundle.velocity.clone();
                let mut per_instance = Vec::with_capacity(instances.len());
                for inst in &instances {
                    if inst.phase == 1 {
                        let task = &data[inst.task_idx].0;
                        per_instance.push(Some(sample_candidates(
                            &bundle, &snapshot, inst, task, &mut rng,
                        )?));
                    } else {
                        per_instance.push(None);
                    }
                }
                Some(per_instance)
            } else {
                None
            };
            let mut order: Vec<usize> = (0..instances.len()).collect();
            rng.shuffle(&mut order);
            let mut sums = LossComponents::default();
            for &idx in &order {
                let inst = &instances[idx];
                let task = &data[inst.task_idx].0;
                let cands = refine
                    .as_ref()
                    .and_then(|r| r[idx].as_deref());
                let (components, grads) =
                    instance_step(&bundle, inst, task, stage, cands, &mut rng)?;
                if !grads.is_finite() || !all_finite(&[total_loss(
                    &components,
                    config.lambda1,
                    config.lambda2,
                    config.lambda3,
                )]) {
                    return Err(FlowError::numeric(format!(
                        "non-finite loss or gradient at stage {stage}, epoch {global_epoch}"
                    )));
                }
                opt_velocity.step(&mut bundle.velocity.net, &grads.velocity)?;
                if stage >= 2 {
                    opt_stop.step(&mut bundle.stop.net, &grads.stop)?;
                }
                opt_wc.step(&mut bundle.w_c, &grads.w_c)?;
                sums.flow += components.flow;
                sums.decode += components.decode;
                sums.plan += components.plan;
                sums.consistency += components.consistency;
            }
            let n = instances.len() as f64;
            let mean = LossComponents {
                flow: sums.flow / n,
                decode: sums.decode / n,
                plan: sums.plan / n,
                consistency: sums.consistency / n,
            };
            let report = evaluate_split(&bundle, data, eval_split)?;
            let candidate_utility = if stage == 3 {
                Some(mean_candidate_utility(&bundle, &instances, data)?)
            } else {
                None
            };
            history.rows.push(HistoryRow {
                epoch: global_epoch,
                stage,
                loss_flow: mean.flow,
                loss_decode: mean.decode,
                loss_plan: mean.plan,
                loss_consistency: mean.consistency,
                loss_total: total_loss(&mean, config.lambda1, config.lambda2, config.lambda3),
                anchor_rms: report.anchor_rms,
                dev_tool_em: report.tool_em,
                candidate_utility,
            });
        }
        history.stage_wall_ms[stage - 1] = started.elapsed().as_millis();
        if let Some(dir) = &config.checkpoint_dir {
            bundle.save(dir, &format!("stage{stage}"))?;
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        bundle.save(dir, "model")?;
        history.write_csv(&dir.join("history.csv"))?;
    }
    Ok((bundle, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{generate_dataset, GenConfig};
    use crate::numerics::net::finite_diff_check;
    use crate::semantic::{PhaseTag, Tool, Toolset};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            steps: 8,
            hidden: vec![16],
            stop_hidden: 8,
            mc_draws: 2,
            candidates: 3,
            stage1_epochs: 0,
            stage2_epochs: 0,
            stage3_epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(tasks: usize, seed: u64) -> Vec<(Task, ExpertTrajectory)> {
        let cfg = GenConfig {
            tasks,
            dim: 8,
            chain_min: 2,
            chain_max: 3,
            seed,
            ..GenConfig::default()
        };
        generate_dataset(&cfg)
            .unwrap()
            .into_iter()
            .map(|t| (t, ExpertTrajectory::default()))
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialized_bundle() {
        let config = tiny_config();
        let data = tiny_data(6, 3);
        let (bundle, history) = train(&config, &data).unwrap();
        let fresh = ModelBundle::init(&config).unwrap();
        assert_eq!(
            bundle.velocity.net.flatten_params(),
            fresh.velocity.net.flatten_params()
        );
        assert_eq!(bundle.stop.net.flatten_params(), fresh.stop.net.flatten_params());
        assert_eq!(bundle.w_c.flatten_params(), fresh.w_c.flatten_params());
        assert!(history.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let config = TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 1,
            stage3_epochs: 1,
            ..tiny_config()
        };
        let data = tiny_data(6, 3);
        let (b1, h1) = train(&config, &data).unwrap();
        let (b2, h2) = train(&config, &data).unwrap();
        assert_eq!(h1.rows, h2.rows);
        let p1 = b1.velocity.net.flatten_params();
        let p2 = b2.velocity.net.flatten_params();
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flow_loss_zero_when_field_equals_teacher() {
        // Constant path at y: the teacher is the linear map kappa * (y - z),
        // expressible exactly by a single identity-activation layer.
        let config = TrainConfig {
            funnel_frac: 0.5,
            ..tiny_config()
        };
        let data = tiny_data(4, 9);
        let mut bundle = ModelBundle::init(&config).unwrap();
        let d = config.dim;
        let y = vec![0.25; d];
        let kappa = config.kappa_pull;
        // The contraction wraps the net as pull * (net - z), so matching the
        // teacher only needs the net to emit the attractor point y itself.
        let input_width = bundle.velocity.net.input_dim();
        let mut net = DenseNet::zeros(
            &[input_width, d],
            &[crate::numerics::net::Activation::Identity],
        )
        .unwrap();
        for i in 0..d {
            net.layers[0].bias[i] = y[i];
        }
        bundle.velocity.net = net;
        let task = &data[0].0;
        let inst = Instance {
            task_idx: 0,
            phase: 1,
            context: initial_context(task),
            remaining: vec![],
            path: TargetPath::new(vec![y.clone()], config.burn_in, kappa).unwrap(),
        };
        let mut rng = SeededRng::new(1, 0);
        let mut tape = GradientTape::zeros_like(&bundle.velocity.net);
        let loss = loss_flow_matching(&bundle, &inst, &mut rng, &mut tape).unwrap();
        assert!(loss < 1e-22, "loss {loss}");
    }

    #[test]
    fn flow_loss_matches_closed_form_on_zero_model() {
        // Zero field, constant path, tube-only draws: residual is exactly
        // the teacher pull kappa * (y - z) with z - y ~ N(0, sigma^2 I), so
        // the expected loss is kappa^2 sigma^2 d.
        let config = TrainConfig {
            funnel_frac: 0.0,
            mc_draws: 400,
            steps: 4,
            ..tiny_config()
        };
        let data = tiny_data(4, 9);
        let mut bundle = ModelBundle::init(&config).unwrap();
        let width = bundle.velocity.net.input_dim();
        bundle.velocity.net = DenseNet::zeros(
            &[width, config.dim],
            &[crate::numerics::net::Activation::Identity],
        )
        .unwrap();
        // Disable the contraction term too, so the field is identically zero.
        bundle.velocity.pull = 0.0;
        let task = &data[0].0;
        let y = vec![0.5; config.dim];
        let inst = Instance {
            task_idx: 0,
            phase: 1,
            context: initial_context(task),
            remaining: vec![],
            path: TargetPath::new(vec![y], config.burn_in, config.kappa_pull).unwrap(),
        };
        let mut rng = SeededRng::new(11, 0);
        let mut tape = GradientTape::zeros_like(&bundle.velocity.net);
        let loss = loss_flow_matching(&bundle, &inst, &mut rng, &mut tape).unwrap();
        let expect =
            config.kappa_pull * config.kappa_pull * config.sigma_tube * config.sigma_tube
                * config.dim as f64;
        let rel = (loss - expect).abs() / expect;
        assert!(rel < 0.1, "loss {loss} vs closed form {expect}");
    }

    fn two_tool_toolset(d: usize) -> Toolset {
        let mut e0 = vec![0.0; d];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; d];
        e1[1] = 1.0;
        Toolset::new(vec![
            Tool {
                id: "a".into(),
                description: "a".into(),
                phase: PhaseTag::Other,
                embedding: e0,
            },
            Tool {
                id: "b".into(),
                description: "b".into(),
                phase: PhaseTag::Other,
                embedding: e1,
            },
        ])
        .unwrap()
    }

    #[test]
    fn decode_loss_limits() {
        // Equidistant anchor: tool term ln 2. Zero stop net: stop term ln 2
        // per anchor.
        let config = tiny_config();
        let data = tiny_data(4, 9);
        let mut bundle = ModelBundle::init(&config).unwrap();
        let d = config.dim;
        bundle.stop.net = DenseNet::zeros(
            &[2 * d, 1],
            &[crate::numerics::net::Activation::Identity],
        )
        .unwrap();
        let toolset = two_tool_toolset(d);
        let task0 = &data[0].0;
        let task = Task {
            toolset: toolset.clone(),
            gold: vec![0],
            ..task0.clone()
        };
        let knot = toolset.embedding(0).to_vec();
        let inst = Instance {
            task_idx: 0,
            phase: 1,
            context: initial_context(&task),
            remaining: vec![0],
            path: TargetPath::new(
                vec![knot, vec![0.0; d]],
                config.burn_in,
                config.kappa_pull,
            )
            .unwrap(),
        };
        // Anchor equidistant from both tools, plus a stop anchor.
        let mut mid = vec![0.0; d];
        mid[0] = 0.5;
        mid[1] = 0.5;
        let anchors = vec![mid, vec![0.0; d]];
        let mut anchor_grads = vec![vec![0.0; d]; 2];
        let mut stop_tape = GradientTape::zeros_like(&bundle.stop.net);
        let loss = loss_decode(
            &bundle,
            &inst,
            &task,
            &anchors,
            1.0,
            &mut anchor_grads,
            &mut stop_tape,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        // One tool term at ln 2 plus two stop terms at ln 2.
        assert!((loss - 3.0 * ln2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn consistency_fixed_points_and_gradient() {
        let d = 4;
        let w_c = DenseNet::identity_linear(d).unwrap();
        let ctx = vec![0.3, -0.1, 0.5, 0.0];
        // Anchors exactly on the projection: zero loss.
        let anchors = vec![ctx.clone(), ctx.clone()];
        let mut grads = vec![vec![0.0; d]; 2];
        let mut tape = GradientTape::zeros_like(&w_c);
        let loss =
            loss_consistency(&anchors, &ctx, &w_c, 1.0, &mut grads, &mut tape).unwrap();
        assert!(loss < 1e-30);

        // Single anchor at distance r: loss r^2.
        let mut far = ctx.clone();
        far[0] += 0.7;
        let anchors = vec![far];
        let mut grads = vec![vec![0.0; d]];
        let mut tape = GradientTape::zeros_like(&w_c);
        let loss =
            loss_consistency(&anchors, &ctx, &w_c, 1.0, &mut grads, &mut tape).unwrap();
        assert!((loss - 0.49).abs() < 1e-12);

        // Parameter gradient against finite differences.
        let mut rng = SeededRng::new(3, 0);
        let w = DenseNet::random(
            &[d, d],
            &[crate::numerics::net::Activation::Identity],
            0.5,
            &mut rng,
        )
        .unwrap();
        let anchors = vec![rng.normal_vec(d), rng.normal_vec(d)];
        let ctx = rng.normal_vec(d);
        let mut grads = vec![vec![0.0; d]; 2];
        let mut tape = GradientTape::zeros_like(&w);
        loss_consistency(&anchors, &ctx, &w, 1.0, &mut grads, &mut tape).unwrap();
        let anchors2 = anchors.clone();
        let ctx2 = ctx.clone();
        let worst = finite_diff_check(
            move |probe| {
                let mut g = vec![vec![0.0; d]; 2];
                let mut t = GradientTape::zeros_like(probe);
                loss_consistency(&anchors2, &ctx2, probe, 1.0, &mut g, &mut t)
            },
            &tape,
            &w,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn total_loss_is_exact_weighted_sum() {
        let c = LossComponents {
            flow: 1.0,
            decode: 1.0,
            plan: 1.0,
            consistency: 1.0,
        };
        assert_eq!(total_loss(&c, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(total_loss(&c, 1.0, 1.0, 1.0), 4.0);
        let doubled = LossComponents {
            decode: 2.0,
            ..c
        };
        let base = total_loss(&c, 0.5, 1.0, 1.0);
        let more = total_loss(&doubled, 0.5, 1.0, 1.0);
        assert_eq!(more - base, 0.5);
    }

    #[test]
    fn softmax_weight_extremes() {
        let w = softmax_weights(&[0.3, 0.3, 0.3, 0.3]);
        for x in &w {
            assert!((x - 0.25).abs() < 1e-12);
        }
        let utilities: Vec<f64> = (0..8).map(|i| if i == 0 { 10.0 } else { 0.0 }).collect();
        let w = softmax_weights(&utilities);
        assert!(w[0] > 0.999);
    }

    #[test]
    fn refine_loss_zero_at_snapshot() {
        let config = TrainConfig {
            candidates: 3,
            ..tiny_config()
        };
        let data = tiny_data(4, 9);
        let bundle = ModelBundle::init(&config).unwrap();
        let instances =
            build_instances(&bundle, &data, Split::Train, config.seed).unwrap();
        let inst = instances.iter().find(|i| i.phase == 1).unwrap();
        let task = &data[inst.task_idx].0;
        let mut rng = SeededRng::new(2, 0);
        let cands =
            sample_candidates(&bundle, &bundle.velocity, inst, task, &mut rng).unwrap();
        let mut tape = GradientTape::zeros_like(&bundle.velocity.net);
        let loss = loss_plan_refine(&bundle, inst, &cands, 1.0, &mut tape).unwrap();
        assert!(loss < 1e-24, "loss {loss}");
        assert!(tape.sq_norm() < 1e-24);
    }

    #[test]
    fn instance_gradient_matches_finite_differences() {
        let config = TrainConfig {
            dim: 4,
            steps: 6,
            hidden: vec![6],
            stop_hidden: 4,
            mc_draws: 1,
            candidates: 2,
            ..tiny_config()
        };
        let gen = GenConfig {
            tasks: 4,
            dim: 4,
            chain_min: 2,
            chain_max: 2,
            seed: 21,
            ..GenConfig::default()
        };
        let data: Vec<(Task, ExpertTrajectory)> = generate_dataset(&gen)
            .unwrap()
            .into_iter()
            .map(|t| (t, ExpertTrajectory::default()))
            .collect();
        let bundle = ModelBundle::init(&config).unwrap();
        let instances =
            build_instances(&bundle, &data, Split::Train, config.seed).unwrap();
        let inst = instances.iter().find(|i| i.phase == 1).unwrap();
        let task = &data[inst.task_idx].0;
        let mut rng = SeededRng::new(7, 0);
        let cands =
            sample_candidates(&bundle, &bundle.velocity, inst, task, &mut rng).unwrap();

        let eval_rng = || SeededRng::new(99, 4);
        let (_, grads) = instance_step(
            &bundle,
            inst,
            task,
            3,
            Some(&cands),
            &mut eval_rng(),
        )
        .unwrap();
        let total_of = |b: &ModelBundle| -> Result<f64> {
            let (c, _) = instance_step(b, inst, task, 3, Some(&cands), &mut eval_rng())?;
            Ok(total_loss(
                &c,
                b.config.lambda1,
                b.config.lambda2,
                b.config.lambda3,
            ))
        };

        let base = bundle.clone();
        let worst_v = finite_diff_check(
            |probe| {
                let mut b = base.clone();
                b.velocity.net = probe.clone();
                total_of(&b)
            },
            &grads.velocity,
            &bundle.velocity.net,
            1e-5,
        )
        .unwrap();
        assert!(worst_v < 1e-4, "velocity gradient error {worst_v}");

        let worst_s = finite_diff_check(
            |probe| {
                let mut b = base.clone();
                b.stop.net = probe.clone();
                total_of(&b)
            },
            &grads.stop,
            &bundle.stop.net,
            1e-5,
        )
        .unwrap();
        assert!(worst_s < 1e-4, "stop gradient error {worst_s}");

        let worst_w = finite_diff_check(
            |probe| {
                let mut b = base.clone();
                b.w_c = probe.clone();
                total_of(&b)
            },
            &grads.w_c,
            &bundle.w_c,
            1e-5,
        )
        .unwrap();
        assert!(worst_w < 1e-4, "projection gradient error {worst_w}");
    }

    #[test]
    fn bundle_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_config()
        };
        let bundle = ModelBundle::init(&config).unwrap();
        bundle.save(dir.path(), "model").unwrap();
        let back = ModelBundle::load(dir.path(), "model").unwrap();
        assert_eq!(
            bundle.velocity.net.flatten_params(),
            back.velocity.net.flatten_params()
        );
        assert_eq!(bundle.stop.net.flatten_params(), back.stop.net.flatten_params());
        assert_eq!(bundle.w_c.flatten_params(), back.w_c.flatten_params());
    }

    #[test]
    fn config_hash_ignores_checkpoint_dir() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            checkpoint_dir: Some(PathBuf::from("/somewhere/else")),
            ..TrainConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = TrainConfig {
            kappa_pull: 13.0,
            ..TrainConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
