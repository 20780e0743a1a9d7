//! Discrete readout of a latent plan: distance-softmax tool selection per
//! anchor, a learned stop head over (anchor, context), and plan truncation
//! at the first confident stop.

use crate::error::{FlowError, Result};
use crate::flow::LatentPlan;
use crate::numerics::net::{DenseNet, GradientTape};
use crate::numerics::rng::SeededRng;
use crate::semantic::Toolset;
use serde::{Deserialize, Serialize};

/// How a distribution is turned into a tool choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Argmax, lowest index on ties; identical to nearest-tool decoding.
    Map,
    /// Inverse-CDF sampling in tool-index order.
    Sampled,
}

/// Softmax over negated squared anchor-to-tool distances at temperature
/// `epsilon`.
#[derive(Debug, Clone)]
pub struct ToolDistribution {
    pub probs: Vec<f64>,
    pub epsilon: f64,
    /// The anchor the distribution was computed from.
    pub anchor: Vec<f64>,
}

/// p(t | z) proportional to exp(-||z - e_t||^2 / epsilon), computed with
/// max-subtraction so extreme temperatures stay finite.
pub fn tool_probabilities(z: &[f64], toolset: &Toolset, epsilon: f64) -> Result<ToolDistribution> {
    if epsilon <= 0.0 {
        return Err(FlowError::input(format!(
            "temperature {epsilon} must be positive"
        )));
    }
    let logits: Vec<f64> = toolset
        .tools()
        .iter()
        .map(|t| -crate::numerics::vec::dist_sq(z, &t.embedding) / epsilon)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(ToolDistribution {
        probs,
        epsilon,
        anchor: z.to_vec(),
    })
}

/// Argmax with lowest-index tie-break.
pub fn map_decode(dist: &ToolDistribution) -> usize {
    let mut best = 0;
    for (i, p) in dist.probs.iter().enumerate().skip(1) {
        if *p > dist.probs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF sample in tool-index order.
pub fn sample_tool(dist: &ToolDistribution, rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.probs.len() - 1
}

/// Tool cross-entropy at one anchor and its gradient with respect to the
/// anchor: -log p(gold | z), with
/// d/dz = (2/epsilon) (sum_t p_t e_t - e_gold).
pub fn tool_cross_entropy(
    z: &[f64],
    toolset: &Toolset,
    gold: usize,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    if gold >= toolset.len() {
        return Err(FlowError::input(format!("gold index {gold} out of range")));
    }
    let dist = tool_probabilities(z, toolset, epsilon)?;
    let loss = -dist.probs[gold].max(1e-300).ln();
    let d = z.len();
    let mut grad = vec![0.0; d];
    for (t, p) in dist.probs.iter().enumerate() {
        let e = toolset.embedding(t);
        for i in 0..d {
            grad[i] += p * e[i];
        }
    }
    let e_gold = toolset.embedding(gold);
    for i in 0..d {
        grad[i] = (2.0 / epsilon) * (grad[i] - e_gold[i]);
    }
    Ok((loss, grad))
}

fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

fn softplus(l: f64) -> f64 {
    l.max(0.0) + (1.0 + (-l.abs()).exp()).ln()
}

/// Learned halt signal: a dense net over [anchor ; context] producing one
/// logit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopHead {
    pub net: DenseNet,
    dim: usize,
}

impl StopHead {
    pub fn new(dim: usize, hidden: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        let net = DenseNet::mlp(2 * dim, &[hidden], 1, scale, rng)?;
        Ok(StopHead { net, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn assemble(&self, z: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim || ctx.len() != self.dim {
            return Err(FlowError::shape(format!(
                "stop head expects dims ({}, {}), got ({}, {})",
                self.dim,
                self.dim,
                z.len(),
                ctx.len()
            )));
        }
        let mut input = Vec::with_capacity(2 * self.dim);
        input.extend_from_slice(z);
        input.extend_from_slice(ctx);
        Ok(input)
    }

    pub fn logit(&self, z: &[f64], ctx: &[f64]) -> Result<f64> {
        Ok(self.net.apply(&self.assemble(z, ctx)?)?[0])
    }

    /// Logistic of the logit.
    pub fn probability(&self, z: &[f64], ctx: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(z, ctx)?))
    }

    /// Binary cross-entropy against `target` in {0, 1}, with parameter
    /// grads accumulated into `tape` and input grads returned as
    /// `(z grad, ctx grad)`.
    pub fn bce_with_grads(
        &self,
        z: &[f64],
        ctx: &[f64],
        target: f64,
        tape: &mut GradientTape,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let input = self.assemble(z, ctx)?;
        let logit = self.net.apply(&input)?[0];
        let loss = softplus(logit) - target * logit;
        let upstream = [sigmoid(logit) - target];
        let g = self.net.backprop_acc(&input, &upstream, tape, 1.0)?;
        Ok((loss, g[..self.dim].to_vec(), g[self.dim..].to_vec()))
    }
}

/// A decoded plan: chosen tools up to the effective length, plus the stop
/// probabilities observed at every anchor that was visited.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedPlan {
    pub tools: Vec<usize>,
    pub stop_probs: Vec<f64>,
    /// Anchor index where the stop fired, if it did.
    pub stopped_at: Option<usize>,
    pub mode: DecodeMode,
}

impl DecodedPlan {
    pub fn effective_len(&self) -> usize {
        self.tools.len()
    }
}

/// Walks the anchors in order; halts at the first anchor whose stop
/// probability strictly exceeds `theta_stop` (that anchor emits no tool),
/// otherwise decodes all of them.
pub fn decode_plan(
    plan: &LatentPlan,
    toolset: &Toolset,
    epsilon: f64,
    head: &StopHead,
    theta_stop: f64,
    ctx: &[f64],
    mode: DecodeMode,
    rng: &mut SeededRng,
) -> Result<DecodedPlan> {
    if theta_stop <= 0.0 || theta_stop >= 1.0 {
        return Err(FlowError::input(format!(
            "stop threshold {theta_stop} outside (0, 1)"
        )));
    }
    let mut tools = Vec::new();
    let mut stop_probs = Vec::new();
    let mut stopped_at = None;
    for (l, anchor) in plan.anchors.iter().enumerate() {
        let p_stop = head.probability(anchor, ctx)?;
        stop_probs.push(p_stop);
        if p_stop > theta_stop {
            stopped_at = Some(l);
            break;
        }
        let dist = tool_probabilities(anchor, toolset, epsilon)?;
        tools.push(match mode {
            DecodeMode::Map => map_decode(&dist),
            DecodeMode::Sampled => sample_tool(&dist, rng),
        });
    }
    Ok(DecodedPlan {
        tools,
        stop_probs,
        stopped_at,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Trajectory;
    use crate::numerics::net::finite_diff_check;
    use crate::semantic::{PhaseTag, Tool};

    fn axis_toolset(d: usize, n: usize) -> Toolset {
        let tools = (0..n)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                Tool {
                    id: format!("t{i}"),
                    description: format!("t{i}"),
                    phase: PhaseTag::Other,
                    embedding: e,
                }
            })
            .collect();
        Toolset::new(tools).unwrap()
    }

    fn plan_with_anchors(anchors: Vec<Vec<f64>>) -> LatentPlan {
        let n = anchors.len();
        LatentPlan {
            z0: anchors[0].clone(),
            trajectory: Trajectory {
                states: anchors.clone(),
            },
            anchors,
            anchor_times: crate::supervision::knot_times(n, 0.3),
        }
    }

    #[test]
    fn equidistant_tools_split_mass() {
        let ts = axis_toolset(4, 2);
        let z = vec![0.5, 0.5, 0.0, 0.0];
        let d = tool_probabilities(&z, &ts, 0.1).unwrap();
        assert!((d.probs[0] - 0.5).abs() < 1e-12);
        assert!((d.probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_value() {
        // Squared distances (0, 1) at temperature 0.5: the near tool gets
        // 1 / (1 + e^-2).
        let ts = axis_toolset(2, 2);
        let z = vec![1.0, 0.0];
        // dist_sq to t0 = 0, to t1 = 2; rescale by choosing epsilon = 1.0 so
        // the logit gap is 2, same as (0,1) at 0.5.
        let d = tool_probabilities(&z, &ts, 1.0).unwrap();
        let expect = 1.0 / (1.0 + (-2.0_f64).exp());
        assert!((d.probs[0] - expect).abs() < 1e-9);
        assert!((expect - 0.88080).abs() < 1e-5);
    }

    #[test]
    fn argmax_invariant_across_temperatures() {
        let mut rng = SeededRng::new(7, 0);
        let ts = axis_toolset(6, 6);
        for _ in 0..50 {
            let z = rng.normal_vec(6);
            let (nearest, _) = ts.nearest(&z);
            for eps in [0.01, 0.05, 0.1, 0.2, 0.5] {
                let d = tool_probabilities(&z, &ts, eps).unwrap();
                let total: f64 = d.probs.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(d.probs.iter().all(|p| p.is_finite() && *p >= 0.0));
                assert_eq!(map_decode(&d), nearest, "eps {eps}");
            }
        }
    }

    #[test]
    fn extreme_temperatures_stay_finite() {
        let ts = axis_toolset(3, 3);
        let z = vec![30.0, -20.0, 5.0];
        for eps in [1e-6, 1e6] {
            let d = tool_probabilities(&z, &ts, eps).unwrap();
            assert!(d.probs.iter().all(|p| p.is_finite()));
        }
        assert!(tool_probabilities(&z, &ts, 0.0).is_err());
        assert!(tool_probabilities(&z, &ts, -1.0).is_err());
    }

    #[test]
    fn single_tool_both_modes() {
        let ts = axis_toolset(2, 1);
        let d = tool_probabilities(&[0.3, 0.3], &ts, 0.1).unwrap();
        assert_eq!(map_decode(&d), 0);
        let mut rng = SeededRng::new(1, 0);
        assert_eq!(sample_tool(&d, &mut rng), 0);
    }

    #[test]
    fn sample_frequencies_match_probabilities() {
        let ts = axis_toolset(3, 3);
        let z = vec![0.8, 0.5, 0.1];
        let d = tool_probabilities(&z, &ts, 0.5).unwrap();
        let mut rng = SeededRng::new(13, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_tool(&d, &mut rng)] += 1;
        }
        for t in 0..3 {
            let p = d.probs[t];
            let freq = counts[t] as f64 / n as f64;
            let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= tol, "tool {t}: {freq} vs {p}");
        }
    }

    #[test]
    fn sampled_error_obeys_softmax_tail_bound() {
        // P(sample != nearest) <= (N-1) exp(-gap / eps) where gap is the
        // squared-distance margin to the nearest competitor.
        let mut rng = SeededRng::new(17, 0);
        let ts = axis_toolset(5, 5);
        let eps = 0.2;
        for trial in 0..10 {
            let mut z = rng.normal_vec(5);
            for zi in z.iter_mut() {
                *zi *= 0.4;
            }
            let (nearest, _) = ts.nearest(&z);
            let (gap, _) = ts.decoding_margin(&z, nearest).unwrap();
            let d = tool_probabilities(&z, &ts, eps).unwrap();
            let n = 20_000;
            let mut errors = 0;
            for _ in 0..n {
                if sample_tool(&d, &mut rng) != nearest {
                    errors += 1;
                }
            }
            let rate = errors as f64 / n as f64;
            let bound = 4.0 * (-gap / eps).exp();
            // Allow Monte-Carlo slack of 3 standard errors above the bound.
            let slack = 3.0 * (rate.max(1e-4) * (1.0 - rate.min(0.999)) / n as f64).sqrt();
            assert!(rate <= bound + slack, "trial {trial}: {rate} > {bound}");
        }
    }

    #[test]
    fn margin_radius_guarantees_map_decode() {
        let mut rng = SeededRng::new(19, 0);
        let ts = axis_toolset(4, 4);
        for _ in 0..200 {
            let gold = rng.below(4);
            // Target point near the gold embedding.
            let mut y = ts.embedding(gold).to_vec();
            for yi in y.iter_mut() {
                *yi += 0.2 * rng.normal();
            }
            let (_, lin) = ts.decoding_margin(&y, gold).unwrap();
            if lin <= 0.0 {
                continue;
            }
            // Any z within half the linear margin of y decodes to gold.
            let dir = rng.normal_vec(4);
            let n = crate::numerics::vec::norm(&dir);
            let radius = 0.49 * lin;
            let z: Vec<f64> = y
                .iter()
                .zip(&dir)
                .map(|(a, b)| a + radius * b / n)
                .collect();
            let d = tool_probabilities(&z, &ts, 0.1).unwrap();
            assert_eq!(map_decode(&d), gold);
        }
    }

    #[test]
    fn tool_ce_loss_and_grad() {
        let ts = axis_toolset(3, 3);
        // Anchor exactly on gold, far competitors, tiny temperature: loss
        // vanishes.
        let (loss, _) = tool_cross_entropy(ts.embedding(1), &ts, 1, 0.01).unwrap();
        assert!(loss < 1e-12);
        // Equidistant pair: ln 2 against either gold.
        let ts2 = axis_toolset(2, 2);
        let z = vec![0.5, 0.5];
        let (loss, _) = tool_cross_entropy(&z, &ts2, 0, 1e9).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-6);
        // Gradient against central differences.
        let z = vec![0.4, 0.1, -0.2];
        let (_, grad) = tool_cross_entropy(&z, &ts, 2, 0.3).unwrap();
        for i in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (tool_cross_entropy(&zp, &ts, 2, 0.3).unwrap().0
                - tool_cross_entropy(&zm, &ts, 2, 0.3).unwrap().0)
                / 2e-6;
            assert!((grad[i] - fd).abs() < 1e-5, "coord {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn zero_stop_head_is_half() {
        let net = DenseNet::zeros(
            &[4, 3, 1],
            &[
                crate::numerics::net::Activation::Tanh,
                crate::numerics::net::Activation::Identity,
            ],
        )
        .unwrap();
        let head = StopHead { net, dim: 2 };
        let p = head.probability(&[1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(p, 0.5);
        // Zero head also gives ln 2 cross-entropy for either target.
        let mut tape = GradientTape::zeros_like(&head.net);
        let (loss, _, _) = head
            .bce_with_grads(&[1.0, -1.0], &[0.5, 0.5], 1.0, &mut tape)
            .unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stop_bce_gradients_match_finite_difference() {
        let mut rng = SeededRng::new(23, 0);
        let head = StopHead::new(3, 5, 0.8, &mut rng).unwrap();
        let z = rng.normal_vec(3);
        let ctx = rng.normal_vec(3);
        let target = 1.0;
        let mut tape = GradientTape::zeros_like(&head.net);
        let (_, gz, gc) = head.bce_with_grads(&z, &ctx, target, &mut tape).unwrap();
        let max_rel = finite_diff_check(
            |n| {
                let h = StopHead {
                    net: n.clone(),
                    dim: 3,
                };
                let l = h.logit(&z, &ctx)?;
                Ok(softplus(l) - target * l)
            },
            &tape,
            &head.net,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-5, "param grads off by {max_rel}");
        for i in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let lp = head.logit(&zp, &ctx).unwrap();
            let lm = head.logit(&zm, &ctx).unwrap();
            let fd = (softplus(lp) - target * lp - softplus(lm) + target * lm) / 2e-6;
            assert!((gz[i] - fd).abs() < 1e-5);
            let mut cp = ctx.clone();
            let mut cm = ctx.clone();
            cp[i] += 1e-6;
            cm[i] -= 1e-6;
            let lp = head.logit(&z, &cp).unwrap();
            let lm = head.logit(&z, &cm).unwrap();
            let fd = (softplus(lp) - target * lp - softplus(lm) + target * lm) / 2e-6;
            assert!((gc[i] - fd).abs() < 1e-5);
        }
    }

    /// Head with a fixed bias so its stop probability is constant.
    fn constant_head(dim: usize, logit: f64) -> StopHead {
        let mut net = DenseNet::zeros(
            &[2 * dim, 1],
            &[crate::numerics::net::Activation::Identity],
        )
        .unwrap();
        net.layers[0].bias[0] = logit;
        StopHead { net, dim }
    }

    #[test]
    fn decode_plan_halt_rules() {
        let ts = axis_toolset(3, 3);
        let anchors = vec![
            ts.embedding(2).to_vec(),
            ts.embedding(0).to_vec(),
            ts.embedding(1).to_vec(),
        ];
        let plan = plan_with_anchors(anchors);
        let ctx = vec![0.0; 3];
        let mut rng = SeededRng::new(3, 0);

        // Stop fires immediately: empty sequence.
        let always = constant_head(3, 10.0);
        let d = decode_plan(&plan, &ts, 0.1, &always, 0.5, &ctx, DecodeMode::Map, &mut rng)
            .unwrap();
        assert!(d.tools.is_empty());
        assert_eq!(d.stopped_at, Some(0));
        assert_eq!(d.effective_len(), 0);

        // Stop never fires: full length, tools match nearest chain.
        let never = constant_head(3, -10.0);
        let d = decode_plan(&plan, &ts, 0.1, &never, 0.5, &ctx, DecodeMode::Map, &mut rng)
            .unwrap();
        assert_eq!(d.tools, vec![2, 0, 1]);
        assert_eq!(d.stopped_at, None);
        assert_eq!(d.stop_probs.len(), 3);

        // Threshold is strict: probability exactly at theta does not halt.
        let at_half = constant_head(3, 0.0);
        let d = decode_plan(&plan, &ts, 0.1, &at_half, 0.5, &ctx, DecodeMode::Map, &mut rng)
            .unwrap();
        assert_eq!(d.effective_len(), 3);

        // Bad threshold rejected.
        assert!(
            decode_plan(&plan, &ts, 0.1, &never, 1.0, &ctx, DecodeMode::Map, &mut rng).is_err()
        );
    }
}
