//! Supervision targets for the flow: frozen encoding heads that map
//! workflow steps to latent knots, and piecewise-linear target paths with
//! an exponential pull-in teacher field.
//!
//! The heads are initialized once with a structured scheme (tool embedding
//! passes through unchanged, text channels enter at small scale, phase
//! offsets start at zero) and are never trained. Training only the velocity
//! field against fixed targets keeps the regression well-posed: if the
//! targets could drift, any constant path would zero the flow loss.

use crate::error::{FlowError, Result};
use crate::numerics::net::{Activation, DenseNet};
use crate::numerics::rng::SeededRng;
use crate::numerics::vec::{all_finite, axpy};
use crate::semantic::{hash_embed, PhaseTag};
use serde::{Deserialize, Serialize};

/// Scale for the frozen text-channel projections.
const TEXT_CHANNEL_SCALE: f64 = 0.03;

/// Frozen maps from step annotations to latent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisionHeads {
    dim: usize,
    text_salt: u64,
    /// Tool embedding map; identity at init so knots sit on tool embeddings.
    tool_map: DenseNet,
    /// Rationale text encoder and its small projection into latent space.
    rationale_enc: DenseNet,
    rationale_map: DenseNet,
    /// Observation text encoder and projection.
    observation_enc: DenseNet,
    observation_map: DenseNet,
    /// Per-phase additive offset, zero at init.
    phase_offsets: Vec<Vec<f64>>,
}

impl SupervisionHeads {
    /// Structured initialization; deterministic in `(dim, seed)`.
    pub fn frozen_init(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(FlowError::input("latent dimension must be at least 2"));
        }
        let mut rng = SeededRng::labeled(seed, "supervision-heads", 0);
        let hidden = dim.max(8);
        Ok(SupervisionHeads {
            dim,
            text_salt: seed ^ 0xA5A5_5A5A_0F0F_F0F0,
            tool_map: DenseNet::identity_linear(dim)?,
            rationale_enc: DenseNet::mlp(dim, &[hidden], dim, 1.0, &mut rng)?,
            rationale_map: DenseNet::random(&[dim, dim], &[Activation::Identity], TEXT_CHANNEL_SCALE, &mut rng)?,
            observation_enc: DenseNet::mlp(dim, &[hidden], dim, 1.0, &mut rng)?,
            observation_map: DenseNet::random(&[dim, dim], &[Activation::Identity], TEXT_CHANNEL_SCALE, &mut rng)?,
            phase_offsets: vec![vec![0.0; dim]; PhaseTag::COUNT],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Latent knot for one workflow step.
    ///
    /// y = tool_map(e) + rationale channel + observation channel + phase
    /// offset. Absent annotations contribute nothing.
    pub fn encode_step(
        &self,
        tool_embedding: &[f64],
        rationale: Option<&str>,
        observation: Option<&str>,
        phase: PhaseTag,
    ) -> Result<Vec<f64>> {
        if tool_embedding.len() != self.dim {
            return Err(FlowError::shape(format!(
                "tool embedding dim {}, heads expect {}",
                tool_embedding.len(),
                self.dim
            )));
        }
        let mut y = self.tool_map.apply(tool_embedding)?;
        if let Some(r) = rationale {
            let feat = hash_embed(r, self.dim, self.text_salt)?;
            let enc = self.rationale_enc.apply(&feat)?;
            axpy(&mut y, 1.0, &self.rationale_map.apply(&enc)?);
        }
        if let Some(o) = observation {
            let feat = hash_embed(o, self.dim, self.text_salt.wrapping_add(1))?;
            let enc = self.observation_enc.apply(&feat)?;
            axpy(&mut y, 1.0, &self.observation_map.apply(&enc)?);
        }
        axpy(&mut y, 1.0, &self.phase_offsets[phase.index()]);
        if !all_finite(&y) {
            return Err(FlowError::numeric("non-finite supervision knot"));
        }
        Ok(y)
    }
}

/// Knot times on the unit interval: the uniform grid `(j - 1) / (count - 1)`
/// for `count >= 2`, so the first knot sits at `s = 0` and the last at
/// `s = 1`; a single knot sits at `s = 1`.
pub fn knot_times(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    (0..count)
        .map(|j| j as f64 / (count - 1) as f64)
        .collect()
}

/// Piecewise-linear target path through latent knots, plus the pull-in
/// teacher field `u(z, s) = dy/ds + kappa * (y(s) - z)`.
///
/// Along the teacher flow the offset `w(s) = z(s) - y(s)` obeys
/// `dw/ds = -kappa * w` exactly, segment by segment, so trajectories decay
/// onto the path at rate `kappa` regardless of where they start.
#[derive(Debug, Clone)]
pub struct TargetPath {
    knots: Vec<Vec<f64>>,
    times: Vec<f64>,
    kappa: f64,
}

impl TargetPath {
    pub fn new(knots: Vec<Vec<f64>>, kappa: f64) -> Result<Self> {
        if knots.is_empty() {
            return Err(FlowError::input("target path needs at least one knot"));
        }
        if kappa <= 0.0 {
            return Err(FlowError::input("pull rate must be positive"));
        }
        let d = knots[0].len();
        for k in &knots {
            if k.len() != d {
                return Err(FlowError::shape("knot dimensions disagree"));
            }
            if !all_finite(k) {
                return Err(FlowError::numeric("non-finite knot"));
            }
        }
        let times = knot_times(knots.len());
        Ok(TargetPath { knots, times, kappa })
    }

    pub fn dim(&self) -> usize {
        self.knots[0].len()
    }

    pub fn knots(&self) -> &[Vec<f64>] {
        &self.knots
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Path value at `s`: first knot before its time, last knot after, and
    /// linear interpolation between bracketing knots.
    pub fn point(&self, s: f64) -> Vec<f64> {
        if s <= self.times[0] || self.knots.len() == 1 {
            return self.knots[0].clone();
        }
        let last = self.times.len() - 1;
        if s >= self.times[last] {
            return self.knots[last].clone();
        }
        let j = match self.times.iter().position(|&t| t > s) {
            Some(j) => j,
            None => return self.knots[last].clone(),
        };
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let a = (s - t0) / (t1 - t0);
        self.knots[j - 1]
            .iter()
            .zip(&self.knots[j])
            .map(|(p, q)| p + a * (q - p))
            .collect()
    }

    /// Right-limit slope at `s`: zero before the first knot and at or after
    /// the last, the segment slope elsewhere.
    pub fn slope(&self, s: f64) -> Vec<f64> {
        let last = self.times.len() - 1;
        if self.knots.len() == 1 || s < self.times[0] || s >= self.times[last] {
            return vec![0.0; self.dim()];
        }
        let j = self
            .times
            .iter()
            .position(|&t| t > s)
            .unwrap_or(last);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let inv = 1.0 / (t1 - t0);
        self.knots[j - 1]
            .iter()
            .zip(&self.knots[j])
            .map(|(p, q)| (q - p) * inv)
            .collect()
    }

    /// Teacher field at `(z, s)`.
    pub fn teacher_velocity(&self, z: &[f64], s: f64) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(FlowError::shape(format!(
                "state dim {}, path dim {}",
                z.len(),
                self.dim()
            )));
        }
        let y = self.point(s);
        let mut u = self.slope(s);
        for i in 0..u.len() {
            u[i] += self.kappa * (y[i] - z[i]);
        }
        Ok(u)
    }

    /// Gaussian tube sample around the path: `y(s) + sigma * g`.
    pub fn sample_tube(&self, s: f64, sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
        let mut z = self.point(s);
        for zi in z.iter_mut() {
            *zi += sigma * rng.normal();
        }
        z
    }

    /// Exact teacher-flow state at `s` for a start `z0`:
    /// `y(s) + exp(-kappa * s) * (z0 - y(0))`. Sampled with z0 drawn from
    /// the plan prior, these cover the transport from the prior onto the
    /// path that tube noise alone misses.
    pub fn funnel_state(&self, z0: &[f64], s: f64) -> Vec<f64> {
        let y0 = &self.knots[0];
        let decay = (-self.kappa * s).exp();
        let mut z = self.point(s);
        for i in 0..z.len() {
            z[i] += decay * (z0[i] - y0[i]);
        }
        z
    }
}
