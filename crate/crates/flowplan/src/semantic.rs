//! Tool embedding space: feature-hashed text embeddings, toolsets with
//! cached geometry, decoding margins, and manifold coverage measures.
//!
//! All tool embeddings are unit-norm so squared distances and cosines are
//! interchangeable up to an affine map, and the distance-softmax decoder
//! sees a bounded geometry.

use crate::error::{FlowError, Result};
use crate::numerics::rng::SeededRng;
use crate::numerics::vec::{dist, dist_sq, norm, normalized};
use serde::{Deserialize, Serialize};

/// Workflow phase tag attached to each tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseTag {
    Retrieval,
    Verification,
    DatabaseOp,
    Other,
}

impl PhaseTag {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            PhaseTag::Retrieval => 0,
            PhaseTag::Verification => 1,
            PhaseTag::DatabaseOp => 2,
            PhaseTag::Other => 3,
        }
    }

    /// Lenient parse: unknown strings map to `Other`.
    pub fn parse(s: &str) -> PhaseTag {
        match s.to_ascii_lowercase().as_str() {
            "retrieval" => PhaseTag::Retrieval,
            "verification" => PhaseTag::Verification,
            "database-op" | "database_op" | "databaseop" => PhaseTag::DatabaseOp,
            _ => PhaseTag::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Retrieval => "retrieval",
            PhaseTag::Verification => "verification",
            PhaseTag::DatabaseOp => "database-op",
            PhaseTag::Other => "other",
        }
    }
}

/// A callable tool: identity, description, phase, unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub id: String,
    pub description: String,
    pub phase: PhaseTag,
    pub embedding: Vec<f64>,
}

/// The action space visible at one phase, with cached geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toolset {
    tools: Vec<Tool>,
    /// Max pairwise embedding distance; 0 for a single tool.
    diameter: f64,
}

impl Toolset {
    /// Builds from tools whose embeddings are already set.
    ///
    /// Ids must be unique and embeddings unit-norm within 1e-6. Embeddings
    /// are kept bit-for-bit as given so construction round-trips exactly.
    pub fn new(tools: Vec<Tool>) -> Result<Self> {
        if tools.is_empty() {
            return Err(FlowError::input("toolset must contain at least one tool"));
        }
        let d = tools[0].embedding.len();
        if d < 2 {
            return Err(FlowError::input("embedding dimension must be at least 2"));
        }
        for i in 0..tools.len() {
            for j in (i + 1)..tools.len() {
                if tools[i].id == tools[j].id {
                    return Err(FlowError::input(format!(
                        "duplicate tool id '{}'",
                        tools[i].id
                    )));
                }
            }
        }
        for t in &tools {
            if t.embedding.len() != d {
                return Err(FlowError::shape(format!(
                    "tool '{}' has embedding dim {}, expected {}",
                    t.id,
                    t.embedding.len(),
                    d
                )));
            }
            let n = norm(&t.embedding);
            if (n - 1.0).abs() > 1e-6 {
                return Err(FlowError::input(format!(
                    "tool '{}' embedding norm {} is not unit",
                    t.id, n
                )));
            }
        }
        let mut diameter = 0.0_f64;
        for i in 0..tools.len() {
            for j in (i + 1)..tools.len() {
                diameter = diameter.max(dist(&tools[i].embedding, &tools[j].embedding));
            }
        }
        Ok(Toolset { tools, diameter })
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tools[0].embedding.len()
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn tool(&self, index: usize) -> &Tool {
        &self.tools[index]
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.tools[index].embedding
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tools.iter().position(|t| t.id == id)
    }

    /// Index and distance of the nearest tool; lowest index wins ties.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = 0;
        let mut best_d = dist(z, &self.tools[0].embedding);
        for (i, t) in self.tools.iter().enumerate().skip(1) {
            let d = dist(z, &t.embedding);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        (best, best_d)
    }

    /// Margins of `y` for the intended tool: `(squared, linear)`.
    ///
    /// squared = min over competitors of (||y - e_t||^2 - ||y - e_gold||^2),
    /// linear  = the same gap in unsquared distances. Requires at least two
    /// tools. Both are negative when the intended tool is not the nearest.
    pub fn decoding_margin(&self, y: &[f64], gold: usize) -> Result<(f64, f64)> {
        if self.tools.len() < 2 {
            return Err(FlowError::input(
                "decoding margin needs at least two tools",
            ));
        }
        if gold >= self.tools.len() {
            return Err(FlowError::input(format!("gold index {gold} out of range")));
        }
        let d_gold_sq = dist_sq(y, &self.tools[gold].embedding);
        let d_gold = d_gold_sq.sqrt();
        let mut sq = f64::INFINITY;
        let mut lin = f64::INFINITY;
        for (i, t) in self.tools.iter().enumerate() {
            if i == gold {
                continue;
            }
            let ds = dist_sq(y, &t.embedding);
            sq = sq.min(ds - d_gold_sq);
            lin = lin.min(ds.sqrt() - d_gold);
        }
        Ok((sq, lin))
    }
}

/// A sampled region of the embedding manifold, as a finite probe set.
#[derive(Debug, Clone)]
pub struct ManifoldRegion {
    pub probes: Vec<Vec<f64>>,
}

impl ManifoldRegion {
    pub fn new(probes: Vec<Vec<f64>>) -> Result<Self> {
        if probes.is_empty() {
            return Err(FlowError::input("manifold region needs probes"));
        }
        Ok(ManifoldRegion { probes })
    }
}

/// Character-3-gram feature hashing into `d` signed buckets, L2-normalized.
///
/// Deterministic for fixed `(text, d, salt)`. Texts shorter than 3 chars
/// hash as a single gram.
pub fn hash_embed(text: &str, d: usize, salt: u64) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(FlowError::input("cannot embed empty text"));
    }
    if d < 2 {
        return Err(FlowError::input("embedding dimension must be at least 2"));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0_f64; d];
    let mut add_gram = |gram: &[char]| {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for c in gram {
            h ^= *c as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        let bucket = (h % d as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };
    if chars.len() < 3 {
        add_gram(&chars);
    } else {
        for w in chars.windows(3) {
            add_gram(w);
        }
    }
    normalized(&v).ok_or_else(|| {
        // Signed counts can cancel exactly; fall back to a deterministic axis.
        FlowError::numeric("hashed feature vector collapsed to zero")
    })
}

/// Builds a toolset by hash-embedding each description.
pub fn build_toolset(specs: &[(String, String, PhaseTag)], d: usize, salt: u64) -> Result<Toolset> {
    let tools = specs
        .iter()
        .map(|(id, desc, phase)| {
            Ok(Tool {
                id: id.clone(),
                description: desc.clone(),
                phase: *phase,
                embedding: hash_embed(desc, d, salt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Toolset::new(tools)
}

/// Covering radius: sup over region probes of the distance to the nearest
/// training tool. Zero when every probe coincides with a tool.
pub fn covering_radius(train: &Toolset, region: &ManifoldRegion) -> f64 {
    region
        .probes
        .iter()
        .map(|p| train.nearest(p).1)
        .fold(0.0, f64::max)
}

/// Semantic shift: sup over unseen tools of the distance to the nearest
/// point of the training region.
pub fn semantic_shift(unseen: &Toolset, region: &ManifoldRegion) -> f64 {
    unseen
        .tools()
        .iter()
        .map(|t| {
            region
                .probes
                .iter()
                .map(|p| dist(&t.embedding, p))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Orthonormal pair spanning a random 2-plane in R^d.
pub fn random_plane(d: usize, rng: &mut SeededRng) -> (Vec<f64>, Vec<f64>) {
    let u = loop {
        if let Some(u) = normalized(&rng.normal_vec(d)) {
            break u;
        }
    };
    loop {
        let mut w = rng.normal_vec(d);
        let proj = crate::numerics::vec::dot(&w, &u);
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi -= proj * ui;
        }
        if let Some(w) = normalized(&w) {
            return (u, w);
        }
    }
}

/// Point on the unit circle spanned by `(u, w)` at angle `theta`.
pub fn circle_point(u: &[f64], w: &[f64], theta: f64) -> Vec<f64> {
    u.iter()
        .zip(w)
        .map(|(a, b)| a * theta.cos() + b * theta.sin())
        .collect()
}

/// `n` unit embeddings evenly spaced on a great circle, with optional
/// per-tool angular jitter (fraction of the spacing).
pub fn great_circle_embeddings(
    u: &[f64],
    w: &[f64],
    n: usize,
    phase_offset: f64,
    jitter: f64,
    rng: &mut SeededRng,
) -> Vec<Vec<f64>> {
    let step = 2.0 * std::f64::consts::PI / n as f64;
    (0..n)
        .map(|i| {
            let j = if jitter > 0.0 {
                jitter * step * (rng.uniform() - 0.5)
            } else {
                0.0
            };
            circle_point(u, w, phase_offset + i as f64 * step + j)
        })
        .collect()
}

/// Dense probe set along an arc of the circle `(u, w)`.
pub fn arc_region(u: &[f64], w: &[f64], theta_min: f64, theta_max: f64, probes: usize) -> ManifoldRegion {
    let n = probes.max(2);
    let pts = (0..n)
        .map(|i| {
            let t = theta_min + (theta_max - theta_min) * i as f64 / (n - 1) as f64;
            circle_point(u, w, t)
        })
        .collect();
    ManifoldRegion::new(pts).expect("non-empty probe set")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::vec::dot;

    fn axis_tool(id: &str, d: usize, axis: usize, sign: f64) -> Tool {
        let mut e = vec![0.0; d];
        e[axis] = sign;
        Tool {
            id: id.into(),
            description: id.into(),
            phase: PhaseTag::Other,
            embedding: e,
        }
    }

    #[test]
    fn hash_embed_is_unit_and_deterministic() {
        let a = hash_embed("get order status", 16, 7).unwrap();
        let b = hash_embed("get order status", 16, 7).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_ne!(a, hash_embed("get order status", 16, 8).unwrap());
    }

    #[test]
    fn hash_embed_rejects_bad_input() {
        assert!(hash_embed("", 16, 0).is_err());
        assert!(hash_embed("abc", 1, 0).is_err());
    }

    #[test]
    fn shared_ngrams_embed_closer_on_average() {
        // Texts sharing most 3-grams should be more similar than unrelated
        // ones across many salts.
        let mut sim_near = 0.0;
        let mut sim_far = 0.0;
        for salt in 0..50 {
            let a = hash_embed("get order status", 32, salt).unwrap();
            let b = hash_embed("get order details", 32, salt).unwrap();
            let c = hash_embed("cancel subscription", 32, salt).unwrap();
            sim_near += dot(&a, &b);
            sim_far += dot(&a, &c);
        }
        assert!(
            sim_near / 50.0 > sim_far / 50.0,
            "near {sim_near} vs far {sim_far}"
        );
    }

    #[test]
    fn toolset_diameter_antipodal() {
        let ts = Toolset::new(vec![
            axis_tool("a", 4, 0, 1.0),
            axis_tool("b", 4, 0, -1.0),
        ])
        .unwrap();
        assert!((ts.diameter() - 2.0).abs() < 1e-12);
        assert_eq!(ts.len(), 2);
    }

    #[test]
    fn toolset_rejects_duplicates_and_non_unit() {
        let err = Toolset::new(vec![axis_tool("a", 4, 0, 1.0), axis_tool("a", 4, 1, 1.0)]);
        assert!(err.is_err());
        let mut bad = axis_tool("b", 4, 0, 1.0);
        bad.embedding[0] = 0.5;
        assert!(Toolset::new(vec![axis_tool("a", 4, 1, 1.0), bad]).is_err());
    }

    #[test]
    fn nearest_breaks_ties_by_lowest_index() {
        let ts = Toolset::new(vec![
            axis_tool("a", 3, 0, 1.0),
            axis_tool("b", 3, 1, 1.0),
        ])
        .unwrap();
        // Equidistant query.
        let q = vec![0.5, 0.5, 0.0];
        let (idx, _) = ts.nearest(&q);
        assert_eq!(idx, 0);
    }

    #[test]
    fn margin_signs_and_values() {
        let ts = Toolset::new(vec![
            axis_tool("a", 2, 0, 1.0),
            axis_tool("b", 2, 1, 1.0),
        ])
        .unwrap();
        // y exactly on tool a: squared margin = ||a-b||^2 = 2, linear = sqrt(2).
        let (sq, lin) = ts.decoding_margin(&[1.0, 0.0], 0).unwrap();
        assert!((sq - 2.0).abs() < 1e-12);
        assert!((lin - 2.0_f64.sqrt()).abs() < 1e-12);
        // Wrong gold: negative margins.
        let (sq, lin) = ts.decoding_margin(&[1.0, 0.0], 1).unwrap();
        assert!(sq < 0.0 && lin < 0.0);
    }

    #[test]
    fn margin_needs_two_tools() {
        let ts = Toolset::new(vec![axis_tool("a", 2, 0, 1.0)]).unwrap();
        assert!(ts.decoding_margin(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn covering_radius_of_probed_arc() {
        let mut rng = SeededRng::new(9, 0);
        let (u, w) = random_plane(8, &mut rng);
        let embeds = great_circle_embeddings(&u, &w, 8, 0.0, 0.0, &mut rng);
        let tools: Vec<Tool> = embeds
            .iter()
            .enumerate()
            .map(|(i, e)| Tool {
                id: format!("t{i}"),
                description: format!("t{i}"),
                phase: PhaseTag::Other,
                embedding: e.clone(),
            })
            .collect();
        let ts = Toolset::new(tools).unwrap();
        let region = arc_region(&u, &w, 0.0, 2.0 * std::f64::consts::PI, 512);
        let r = covering_radius(&ts, &region);
        // Worst probe sits mid-way between adjacent tools: chord of half the
        // spacing, 2 sin(pi/16).
        let expect = 2.0 * (std::f64::consts::PI / 16.0).sin();
        assert!((r - expect).abs() < 0.01, "radius {r} vs {expect}");
        // Probes on the tools themselves: radius 0.
        let tight = ManifoldRegion::new(embeds).unwrap();
        assert!(covering_radius(&ts, &tight) < 1e-12);
    }

    #[test]
    fn semantic_shift_matches_construction() {
        let mut rng = SeededRng::new(10, 0);
        let (u, w) = random_plane(6, &mut rng);
        let region = arc_region(&u, &w, 0.0, 1.0, 512);
        // Unseen tool rotated out of the (u, w) plane by angle phi around a
        // third axis: distance to the arc is about the chord 2 sin(phi/2).
        let mut v = rng.normal_vec(6);
        let pu = dot(&v, &u);
        let pw = dot(&v, &w);
        for i in 0..6 {
            v[i] -= pu * u[i] + pw * w[i];
        }
        let v = normalized(&v).unwrap();
        let phi = 0.3_f64;
        let base = circle_point(&u, &w, 0.5);
        let unseen_embed: Vec<f64> = base
            .iter()
            .zip(&v)
            .map(|(b, vi)| b * phi.cos() + vi * phi.sin())
            .collect();
        let unseen = Toolset::new(vec![
            Tool {
                id: "u0".into(),
                description: "u0".into(),
                phase: PhaseTag::Other,
                embedding: unseen_embed,
            },
            Tool {
                id: "on-arc".into(),
                description: "on-arc".into(),
                phase: PhaseTag::Other,
                embedding: circle_point(&u, &w, 0.5),
            },
        ])
        .unwrap();
        let shift = semantic_shift(&unseen, &region);
        let expect = 2.0 * (phi / 2.0).sin();
        assert!((shift - expect).abs() < 0.01, "shift {shift} vs {expect}");
    }

    #[test]
    fn monotonicity_under_additions() {
        let mut rng = SeededRng::new(11, 0);
        let (u, w) = random_plane(5, &mut rng);
        let region = arc_region(&u, &w, 0.0, 3.0, 256);
        let embeds = great_circle_embeddings(&u, &w, 6, 0.1, 0.0, &mut rng);
        let mk = |es: &[Vec<f64>]| {
            Toolset::new(
                es.iter()
                    .enumerate()
                    .map(|(i, e)| Tool {
                        id: format!("t{i}"),
                        description: "x".into(),
                        phase: PhaseTag::Other,
                        embedding: e.clone(),
                    })
                    .collect(),
            )
            .unwrap()
        };
        // Adding a training tool can only shrink the covering radius.
        let small = mk(&embeds[..3]);
        let big = mk(&embeds);
        assert!(covering_radius(&big, &region) <= covering_radius(&small, &region) + 1e-12);
        // Adding an unseen tool can only grow the shift.
        let u_small = mk(&embeds[..2]);
        let u_big = mk(&embeds[..4]);
        assert!(semantic_shift(&u_big, &region) >= semantic_shift(&u_small, &region) - 1e-12);
    }

    #[test]
    fn phase_tag_roundtrip() {
        for tag in [
            PhaseTag::Retrieval,
            PhaseTag::Verification,
            PhaseTag::DatabaseOp,
            PhaseTag::Other,
        ] {
            assert_eq!(PhaseTag::parse(tag.as_str()), tag);
        }
        assert_eq!(PhaseTag::parse("unknown-thing"), PhaseTag::Other);
    }
}
