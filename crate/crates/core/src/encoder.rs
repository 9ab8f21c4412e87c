//! Scan-to-token encoder.
//!
//! Tokens are anchored at farthest-point samples of the scan. Each token
//! aggregates its `k` nearest raw points: a shared two-layer pointwise map of
//! neighbor coordinates relative to the anchor, max-pooled over the
//! neighborhood. One multi-head self-attention block then mixes tokens; its
//! logits carry a learned distance penalty and its values carry a relative
//! position term, so nothing depends on absolute coordinates. A layer norm
//! and a final linear projection produce the 64 output channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModtError, Result};
use crate::geometry::{dist2, Point3};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{bind_const, init_linear, init_normal, param_group, ParamSet};
use crate::scans::PointCloud;

pub const FEATURE_WIDTH: usize = 64;
pub const TOKEN_HEADS: usize = 4;
const HEAD_WIDTH: usize = FEATURE_WIDTH / TOKEN_HEADS;
const LAYER_NORM_EPS: f64 = 1e-12;
/// Initial attention ranges (meters) of the token heads.
const HEAD_RANGES: [f64; TOKEN_HEADS] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Tokens per scan (M).
    pub tokens: usize,
    /// Neighborhood size for aggregation (k).
    pub neighbors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokens: 64,
            neighbors: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.neighbors == 0 {
            return Err(ModtError::Config("encoder: tokens and neighbors must be >= 1".into()));
        }
        Ok(())
    }

    /// The same config with the token count capped at `points`, for scans
    /// smaller than M; their affinities are zero-padded back to M.
    pub fn capped(&self, points: usize) -> EncoderConfig {
        EncoderConfig {
            tokens: self.tokens.min(points).max(1),
            ..self.clone()
        }
    }
}

/// M feature tokens of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    /// `M x 64`.
    pub features: Tensor,
    pub positions: Vec<Point3>,
    /// Index of each token's anchor point in the source cloud.
    pub source_index: Vec<usize>,
}

impl TokenSet {
    pub fn empty() -> Self {
        Self {
            features: Tensor::zeros(0, FEATURE_WIDTH),
            positions: Vec::new(),
            source_index: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// An empty set marks a frame downstream stages skip.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

param_group! {
    /// Shared pointwise map applied to relative neighbor coordinates.
    pub struct PointMlp { w1, b1, w2, b2 }
}

param_group! {
    /// One token self-attention head.
    pub struct TokenHead {
        wq,
        wk,
        wv,
        /// Relative-position value projection, `3 x 16`.
        wp,
        /// Output projection, `16 x 64`.
        wo,
        /// Log of the distance penalty applied to attention logits.
        dist_log_scale,
    }
}

param_group! {
    pub struct TokenOutput { ln_gamma, ln_beta, out_w, out_b }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub point: PointMlp<T>,
    pub heads: Vec<TokenHead<T>>,
    pub output: TokenOutput<T>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            point: self.point.map(&format!("{prefix}.point"), f),
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.map(&format!("{prefix}.head{i}"), f))
                .collect(),
            output: self.output.map(&format!("{prefix}.output"), f),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.point.for_each(&format!("{prefix}.point"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.for_each(&format!("{prefix}.head{i}"), f);
        }
        self.output.for_each(&format!("{prefix}.output"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.point.for_each_mut(&format!("{prefix}.point"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.for_each_mut(&format!("{prefix}.head{i}"), f);
        }
        self.output.for_each_mut(&format!("{prefix}.output"), f);
    }
}

impl<T> EncoderParams<T> {
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = self.point.leaves();
        out.extend(self.heads.iter().flat_map(|h| h.leaves()));
        out.extend(self.output.leaves());
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.point.leaves_mut();
        out.extend(self.heads.iter_mut().flat_map(|h| h.leaves_mut()));
        out.extend(self.output.leaves_mut());
        out
    }
}

impl ParamSet for EncoderParams<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.for_each("encoder", &mut |n: &str, t: &Tensor| f(n, t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.for_each_mut("encoder", &mut |n: &str, t: &mut Tensor| f(n, t));
    }
}

impl EncoderParams<Tensor> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let w = FEATURE_WIDTH;
        let point = PointMlp {
            w1: init_normal(rng, 3, w, 2.0 / 3f64.sqrt()),
            b1: init_normal(rng, 1, w, 0.1),
            w2: init_linear(rng, w, w),
            b2: Tensor::zeros(1, w),
        };
        let heads = HEAD_RANGES
            .iter()
            .map(|r| TokenHead {
                wq: init_linear(rng, w, HEAD_WIDTH),
                wk: init_linear(rng, w, HEAD_WIDTH),
                wv: init_linear(rng, w, HEAD_WIDTH),
                wp: init_normal(rng, 3, HEAD_WIDTH, 1.0),
                wo: init_normal(rng, HEAD_WIDTH, w, 0.5 / (HEAD_WIDTH as f64).sqrt()),
                dist_log_scale: Tensor::scalar((1.0 / (r * r)).ln()),
            })
            .collect();
        let output = TokenOutput {
            ln_gamma: Tensor::filled(1, w, 1.0),
            ln_beta: Tensor::zeros(1, w),
            out_w: init_linear(rng, w, w),
            out_b: Tensor::zeros(1, w),
        };
        Self { point, heads, output }
    }
}

/// Greedy farthest-point sampling.
///
/// Starts at index 0; each next index maximizes the distance to the chosen
/// set, ties going to the smallest index. With `pad`, `m > N` repeats the
/// last sampled index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, pad: bool) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 {
        return Err(ModtError::invalid("farthest_point_sample needs m >= 1"));
    }
    if n == 0 {
        return Err(ModtError::invalid("farthest_point_sample on an empty cloud"));
    }
    if m > n && !pad {
        return Err(ModtError::invalid(format!("cannot sample {m} tokens from {n} points")));
    }
    let pts = &cloud.points;
    let take = m.min(n);
    let mut chosen = Vec::with_capacity(m);
    chosen.push(0);
    let mut mind: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[0])).collect();
    while chosen.len() < take {
        let mut best = 0;
        for i in 1..n {
            if mind[i] > mind[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in mind.iter_mut().enumerate() {
            *d = d.min(dist2(&pts[i], &pts[best]));
        }
    }
    let last = *chosen.last().unwrap();
    chosen.resize(m, last);
    Ok(chosen)
}

/// Indices of the `k` nearest points to `center`, ties by index.
fn nearest(points: &[Point3], center: &Point3, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, center), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Token set bound on a tape.
pub struct EncodedTokens {
    pub features: Var,
    /// Layer-norm output before scale/shift and final projection.
    pub normalized: Var,
    pub positions: Vec<Point3>,
    pub source_index: Vec<usize>,
}

/// Records the encoder forward pass for a non-empty cloud.
pub fn encode_on(
    tape: &Tape,
    cloud: &PointCloud,
    params: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    pad: bool,
) -> Result<EncodedTokens> {
    let anchors = farthest_point_sample(cloud, cfg.tokens, pad)?;
    let m = anchors.len();
    let k = cfg.neighbors.min(cloud.len());
    let positions: Vec<Point3> = anchors.iter().map(|&i| cloud.points[i]).collect();

    let mut rel = Vec::with_capacity(m * k * 3);
    for p in &positions {
        for j in nearest(&cloud.points, p, k) {
            let q = cloud.points[j];
            rel.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
        }
    }
    let rel = tape.constant(Tensor::new(m * k, 3, rel)?);
    let pp = &params.point;
    let h = tape.matmul(rel, pp.w1)?;
    let h = tape.add_row(h, pp.b1)?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, pp.w2)?;
    let h = tape.add_row(h, pp.b2)?;
    let x0 = tape.max_pool_groups(h, k)?;

    let pos = tape.constant(Tensor::from_fn(m, 3, |r, c| positions[r][c]));
    let d2 = tape.constant(Tensor::from_fn(m, m, |r, c| dist2(&positions[r], &positions[c])));
    let mut mixed = x0;
    for head in &params.heads {
        let q = tape.matmul(x0, head.wq)?;
        let kk = tape.matmul(x0, head.wk)?;
        let v = tape.matmul(x0, head.wv)?;
        let logits = tape.matmul_t(q, kk)?;
        let logits = tape.scale(logits, 1.0 / (HEAD_WIDTH as f64).sqrt());
        let penalty = tape.exp(head.dist_log_scale);
        let penalty = tape.scale_by(d2, penalty)?;
        let logits = tape.sub(logits, penalty)?;
        let alpha = tape.softmax_rows(logits)?;
        let ctx = tape.matmul(alpha, v)?;
        let centroid = tape.matmul(alpha, pos)?;
        let rel_pos = tape.sub(centroid, pos)?;
        let rel_pos = tape.matmul(rel_pos, head.wp)?;
        let out = tape.add(ctx, rel_pos)?;
        let out = tape.matmul(out, head.wo)?;
        mixed = tape.add(mixed, out)?;
    }
    let out = &params.output;
    let normalized = tape.layer_norm_rows(mixed, LAYER_NORM_EPS)?;
    let y = tape.mul_row(normalized, out.ln_gamma)?;
    let y = tape.add_row(y, out.ln_beta)?;
    let y = tape.matmul(y, out.out_w)?;
    let features = tape.add_row(y, out.out_b)?;
    Ok(EncodedTokens {
        features,
        normalized,
        positions,
        source_index: anchors,
    })
}

/// Encodes a scan into `m` tokens. An empty cloud yields an empty set.
pub fn encode(cloud: &PointCloud, params: &EncoderParams, m: usize) -> Result<TokenSet> {
    encode_with(cloud, params, &EncoderConfig { tokens: m, ..EncoderConfig::default() }, false)
}

/// [`encode`] with an explicit config; `pad` allows `m > N` by repeating
/// the last anchor.
pub fn encode_with(cloud: &PointCloud, params: &EncoderParams, cfg: &EncoderConfig, pad: bool) -> Result<TokenSet> {
    if cloud.is_empty() {
        return Ok(TokenSet::empty());
    }
    let tape = Tape::new();
    let bound = params.map("encoder", &mut bind_const(&tape));
    let enc = encode_on(&tape, cloud, &bound, cfg, pad)?;
    Ok(TokenSet {
        features: (*tape.value(enc.features)).clone(),
        positions: enc.positions,
        source_index: enc.source_index,
    })
}
