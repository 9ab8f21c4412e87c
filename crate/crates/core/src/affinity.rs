//! Cosine affinities between consecutive token sets and their attention-based
//! refinement.
//!
//! Queries, keys and values are produced from an affinity matrix by a
//! pointwise convolution (every entry passes through the same
//! `1 -> C -> 1` map with a tanh in between) followed by a linear projection
//! over columns. Neither stage has a bias, so a zero matrix stays zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSet;
use crate::error::{ModtError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{bind_const, init_linear, param_group};

const NORM_EPS: f64 = 1e-12;

/// Which consecutive scan pair a matrix relates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairTag {
    /// Rows index scan `t`, columns scan `t-1`.
    Current,
    /// Rows index scan `t-1`, columns scan `t-2`.
    Previous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Tensor,
    pub pair: PairTag,
    /// Rows `>= valid_rows` and columns `>= valid_cols` belong to padding tokens.
    pub valid_rows: usize,
    pub valid_cols: usize,
}

impl AffinityMatrix {
    pub fn new(values: Tensor, pair: PairTag) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c {
            return Err(ModtError::invalid(format!("affinity matrix must be square, got {r}x{c}")));
        }
        Ok(Self {
            values,
            pair,
            valid_rows: r,
            valid_cols: c,
        })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    fn with_values(&self, values: Tensor) -> Self {
        Self { values, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    /// Hidden channels of the pointwise convolution.
    pub conv_channels: usize,
    pub self_attention: bool,
    pub cross_attention: bool,
    /// Also apply the association loss to the self-attended intermediates.
    pub supervise_intermediate: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            conv_channels: 64,
            self_attention: true,
            cross_attention: true,
            supervise_intermediate: false,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels == 0 {
            return Err(ModtError::Config("affinity: conv_channels must be >= 1".into()));
        }
        Ok(())
    }
}

param_group! {
    pub struct AttentionWeights {
        q_in, q_out, q_proj,
        k_in, k_out, k_proj,
        v_in, v_out, v_proj,
    }
}

impl AttentionWeights<Tensor> {
    /// Query and key projections start at identity and the value projection
    /// at zero, so refinement starts as the residual identity.
    pub fn init(rng: &mut impl Rng, m: usize, channels: usize) -> Self {
        let mut conv = || (init_linear(rng, 1, channels).map(|v| v * 0.5), init_linear(rng, channels, 1));
        let (q_in, q_out) = conv();
        let (k_in, k_out) = conv();
        let (v_in, v_out) = conv();
        Self {
            q_in,
            q_out,
            q_proj: Tensor::identity(m),
            k_in,
            k_out,
            k_proj: Tensor::identity(m),
            v_in,
            v_out,
            v_proj: Tensor::zeros(m, m),
        }
    }

    pub fn zeros(m: usize, channels: usize) -> Self {
        let z = |r, c| Tensor::zeros(r, c);
        Self {
            q_in: z(1, channels),
            q_out: z(channels, 1),
            q_proj: z(m, m),
            k_in: z(1, channels),
            k_out: z(channels, 1),
            k_proj: z(m, m),
            v_in: z(1, channels),
            v_out: z(channels, 1),
            v_proj: z(m, m),
        }
    }

    pub fn size(&self) -> usize {
        self.q_proj.rows()
    }
}

/// Records cosine affinity between `a` (later scan) and `b` (earlier scan).
/// The shorter set is padded with zero rows up to `m`.
pub fn affinity_on(tape: &Tape, a: Var, b: Var, m: usize) -> Result<Var> {
    let (ra, ca) = tape.shape(a);
    let (rb, cb) = tape.shape(b);
    if ca != cb {
        return Err(ModtError::invalid(format!("feature width mismatch: {ca} vs {cb}")));
    }
    if ra > m || rb > m {
        return Err(ModtError::invalid("token count exceeds affinity size"));
    }
    let pad = |v: Var, r: usize| -> Result<Var> {
        if r == m {
            Ok(v)
        } else {
            tape.gather_rows(v, (0..m).map(|i| (i < r).then_some(i)).collect())
        }
    };
    let a = tape.normalize_rows(pad(a, ra)?, NORM_EPS);
    let b = tape.normalize_rows(pad(b, rb)?, NORM_EPS);
    let cos = tape.matmul_t(a, b)?;
    Ok(tape.clamp_unit(cos))
}

pub fn build_affinity(later: &TokenSet, earlier: &TokenSet, pair: PairTag) -> Result<AffinityMatrix> {
    build_affinity_sized(later, earlier, pair, later.len().max(earlier.len()))
}

/// [`build_affinity`] zero-padded to `m x m`, the size the attention
/// weights were built for.
pub fn build_affinity_sized(later: &TokenSet, earlier: &TokenSet, pair: PairTag, m: usize) -> Result<AffinityMatrix> {
    if later.is_empty() || earlier.is_empty() {
        return Err(ModtError::invalid("affinity needs two nonempty token sets"));
    }
    let tape = Tape::new();
    let a = tape.constant(later.features.clone());
    let b = tape.constant(earlier.features.clone());
    let v = affinity_on(&tape, a, b, m)?;
    Ok(AffinityMatrix {
        values: (*tape.value(v)).clone(),
        pair,
        valid_rows: later.len(),
        valid_cols: earlier.len(),
    })
}

fn project(tape: &Tape, x: Var, w_in: Var, w_out: Var, proj: Var) -> Result<Var> {
    let conv = tape.pointwise_mlp(x, w_in, w_out)?;
    tape.matmul(conv, proj)
}

/// `softmax(Q(query_src) K(kv_src)^T) V(kv_src)`.
pub fn attend_on(tape: &Tape, query_src: Var, kv_src: Var, w: &AttentionWeights<Var>) -> Result<Var> {
    let (r, c) = tape.shape(query_src);
    if r != c {
        return Err(ModtError::invalid(format!("attention input must be square, got {r}x{c}")));
    }
    if tape.shape(kv_src) != (r, c) {
        return Err(ModtError::invalid("attention inputs differ in shape"));
    }
    if tape.shape(w.q_proj) != (r, r) {
        return Err(ModtError::invalid(format!(
            "attention weights sized for {} tokens, input has {r}",
            tape.shape(w.q_proj).0
        )));
    }
    let q = project(tape, query_src, w.q_in, w.q_out, w.q_proj)?;
    let k = project(tape, kv_src, w.k_in, w.k_out, w.k_proj)?;
    let v = project(tape, kv_src, w.v_in, w.v_out, w.v_proj)?;
    let logits = tape.matmul_t(q, k)?;
    let attn = tape.softmax_rows(logits)?;
    tape.matmul(attn, v)
}

/// Tape handles of one refinement pass.
pub struct RefinedPair {
    /// After self-attention (equal to the raw input when disabled).
    pub s_t: Var,
    pub s_tm1: Var,
    pub a_hat_t: Var,
    pub a_hat_tm1: Var,
}

/// Residual self-attention on each matrix, then residual cross-attention
/// whose queries come from the other matrix.
pub fn refine_on(
    tape: &Tape,
    a_t: Var,
    a_tm1: Var,
    w_self: &AttentionWeights<Var>,
    w_cross: &AttentionWeights<Var>,
    cfg: &AffinityConfig,
) -> Result<RefinedPair> {
    let (s_t, s_tm1) = if cfg.self_attention {
        let d_t = attend_on(tape, a_t, a_t, w_self)?;
        let d_tm1 = attend_on(tape, a_tm1, a_tm1, w_self)?;
        (tape.add(a_t, d_t)?, tape.add(a_tm1, d_tm1)?)
    } else {
        (a_t, a_tm1)
    };
    let (a_hat_t, a_hat_tm1) = if cfg.cross_attention {
        let d_t = attend_on(tape, s_tm1, s_t, w_cross)?;
        let d_tm1 = attend_on(tape, s_t, s_tm1, w_cross)?;
        (tape.add(s_t, d_t)?, tape.add(s_tm1, d_tm1)?)
    } else {
        (s_t, s_tm1)
    };
    Ok(RefinedPair {
        s_t,
        s_tm1,
        a_hat_t,
        a_hat_tm1,
    })
}

pub fn self_attend(a: &AffinityMatrix, w: &AttentionWeights) -> Result<AffinityMatrix> {
    let tape = Tape::new();
    let bound = w.map("", &mut bind_const(&tape));
    let x = tape.constant(a.values.clone());
    let out = attend_on(&tape, x, x, &bound)?;
    Ok(a.with_values((*tape.value(out)).clone()))
}

/// Returns `(A_hat_t, A_hat_tm1)`.
pub fn cross_attend(
    s_t: &AffinityMatrix,
    s_tm1: &AffinityMatrix,
    w: &AttentionWeights,
) -> Result<(AffinityMatrix, AffinityMatrix)> {
    if s_t.values.shape() != s_tm1.values.shape() {
        return Err(ModtError::invalid("cross attention needs matrices of equal size"));
    }
    let tape = Tape::new();
    let bound = w.map("", &mut bind_const(&tape));
    let xt = tape.constant(s_t.values.clone());
    let xtm1 = tape.constant(s_tm1.values.clone());
    let out_t = attend_on(&tape, xtm1, xt, &bound)?;
    let out_tm1 = attend_on(&tape, xt, xtm1, &bound)?;
    Ok((
        s_t.with_values((*tape.value(out_t)).clone()),
        s_tm1.with_values((*tape.value(out_tm1)).clone()),
    ))
}

pub fn refine(
    a_t: &AffinityMatrix,
    a_tm1: &AffinityMatrix,
    w_self: &AttentionWeights,
    w_cross: &AttentionWeights,
    cfg: &AffinityConfig,
) -> Result<(AffinityMatrix, AffinityMatrix)> {
    let tape = Tape::new();
    let ws = w_self.map("", &mut bind_const(&tape));
    let wc = w_cross.map("", &mut bind_const(&tape));
    let xt = tape.constant(a_t.values.clone());
    let xtm1 = tape.constant(a_tm1.values.clone());
    let r = refine_on(&tape, xt, xtm1, &ws, &wc, cfg)?;
    Ok((
        a_t.with_values((*tape.value(r.a_hat_t)).clone()),
        a_tm1.with_values((*tape.value(r.a_hat_tm1)).clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheckOptions};
    use crate::params::{bind_param, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Mat = Vec<Vec<f64>>;

    fn to_mat(t: &Tensor) -> Mat {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn oracle_project(x: &Mat, w_in: &Tensor, w_out: &Tensor, proj: &Tensor) -> Mat {
        let m = x.len();
        let c = w_in.cols();
        let mut conv = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for h in 0..c {
                    acc += (x[i][j] * w_in.get(0, h)).tanh() * w_out.get(h, 0);
                }
                conv[i][j] = acc;
            }
        }
        let mut out = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    out[i][j] += conv[i][k] * proj.get(k, j);
                }
            }
        }
        out
    }

    fn oracle_attend(query_src: &Mat, kv_src: &Mat, w: &AttentionWeights) -> Mat {
        let m = query_src.len();
        let q = oracle_project(query_src, &w.q_in, &w.q_out, &w.q_proj);
        let k = oracle_project(kv_src, &w.k_in, &w.k_out, &w.k_proj);
        let v = oracle_project(kv_src, &w.v_in, &w.v_out, &w.v_proj);
        let mut out = vec![vec![0.0; m]; m];
        for i in 0..m {
            let mut logits = vec![0.0; m];
            for j in 0..m {
                for h in 0..m {
                    logits[j] += q[i][h] * k[j][h];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for h in 0..m {
                    out[i][h] += e[j] / z * v[j][h];
                }
            }
        }
        out
    }

    fn random_weights(rng: &mut ChaCha8Rng, m: usize, c: usize) -> AttentionWeights {
        let mut w = AttentionWeights::zeros(m, c);
        w.visit_mut(&mut |_, t| *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.8..0.8)));
        w
    }

    fn random_affinity(rng: &mut ChaCha8Rng, m: usize, pair: PairTag) -> AffinityMatrix {
        AffinityMatrix::new(Tensor::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0)), pair).unwrap()
    }

    fn assert_close(a: &Tensor, b: &Mat, tol: f64) {
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                assert!((a.get(r, c) - b[r][c]).abs() <= tol, "({r},{c}) {} vs {}", a.get(r, c), b[r][c]);
            }
        }
    }

    fn tokens(rows: &[&[f64]]) -> TokenSet {
        TokenSet {
            features: Tensor::from_rows(rows).unwrap(),
            positions: vec![[0.0; 3]; rows.len()],
            source_index: (0..rows.len()).collect(),
        }
    }

    #[test]
    fn cosine_examples() {
        let a = tokens(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[1.0, 0.0, 0.0]]);
        let b = tokens(&[&[2.0, 0.0, 0.0], &[0.0, 0.0, 3.0], &[1.0, 1.0, 0.0]]);
        let m = build_affinity(&a, &b, PairTag::Current).unwrap();
        assert!((m.values.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(m.values.get(0, 1), 0.0);
        assert!((m.values.get(2, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_gives_zero_entry() {
        let a = tokens(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let b = tokens(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let m = build_affinity(&a, &b, PairTag::Current).unwrap();
        assert_eq!(m.values.get(0, 0), 0.0);
        assert_eq!(m.values.get(1, 1), 0.0);
        assert!(m.values.is_finite());
    }

    #[test]
    fn width_mismatch_rejected() {
        let a = tokens(&[&[1.0, 0.0]]);
        let b = tokens(&[&[1.0, 0.0, 0.0]]);
        assert!(build_affinity(&a, &b, PairTag::Current).is_err());
    }

    #[test]
    fn shorter_set_is_padded() {
        let a = tokens(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let b = tokens(&[&[1.0, 0.0]]);
        let m = build_affinity(&a, &b, PairTag::Current).unwrap();
        assert_eq!(m.values.shape(), (3, 3));
        assert_eq!((m.valid_rows, m.valid_cols), (3, 1));
        for r in 0..3 {
            assert_eq!(m.values.get(r, 1), 0.0);
            assert_eq!(m.values.get(r, 2), 0.0);
        }
    }

    #[test]
    fn affinity_bounded_and_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| TokenSet {
                features: Tensor::from_fn(5, 7, |_, _| rng.random_range(-3.0..3.0)),
                positions: vec![[0.0; 3]; 5],
                source_index: (0..5).collect(),
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = build_affinity(&a, &b, PairTag::Current).unwrap();
            let ba = build_affinity(&b, &a, PairTag::Current).unwrap();
            assert!(ab.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(ab.values, ba.values.transpose());
        }
    }

    #[test]
    fn self_attend_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for m in [4, 8] {
            let a = random_affinity(&mut rng, m, PairTag::Current);
            let w = random_weights(&mut rng, m, 6);
            let out = self_attend(&a, &w).unwrap();
            let x = to_mat(&a.values);
            assert_close(&out.values, &oracle_attend(&x, &x, &w), 1e-12);
        }
    }

    #[test]
    fn cross_attend_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = random_affinity(&mut rng, 4, PairTag::Current);
        let stm1 = random_affinity(&mut rng, 4, PairTag::Previous);
        let w = random_weights(&mut rng, 4, 5);
        let (ot, otm1) = cross_attend(&st, &stm1, &w).unwrap();
        let (xt, xtm1) = (to_mat(&st.values), to_mat(&stm1.values));
        assert_close(&ot.values, &oracle_attend(&xtm1, &xt, &w), 1e-12);
        assert_close(&otm1.values, &oracle_attend(&xt, &xtm1, &w), 1e-12);
        assert_eq!(ot.pair, PairTag::Current);
        assert_eq!(otm1.pair, PairTag::Previous);
    }

    #[test]
    fn zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_weights(&mut rng, 4, 5);
        let z = AffinityMatrix::new(Tensor::zeros(4, 4), PairTag::Current).unwrap();
        assert_eq!(self_attend(&z, &w).unwrap().values, Tensor::zeros(4, 4));
        let (a, b) = cross_attend(&z, &z, &w).unwrap();
        assert_eq!(a.values, Tensor::zeros(4, 4));
        assert_eq!(b.values, Tensor::zeros(4, 4));
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut w = random_weights(&mut rng, 4, 5);
        // A zero key projection makes every logit equal.
        w.k_proj = Tensor::zeros(4, 4);
        w.v_proj = Tensor::identity(4);
        let a = random_affinity(&mut rng, 4, PairTag::Current);
        let out = self_attend(&a, &w).unwrap();
        let x = to_mat(&a.values);
        let v = oracle_project(&x, &w.v_in, &w.v_out, &w.v_proj);
        for r in 0..4 {
            for c in 0..4 {
                let mean = (0..4).map(|j| v[j][c]).sum::<f64>() / 4.0;
                assert!((out.values.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_of_equal_inputs_is_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random_weights(&mut rng, 5, 4);
        let a = random_affinity(&mut rng, 5, PairTag::Current);
        let (x, y) = cross_attend(&a, &a, &w).unwrap();
        let s = self_attend(&a, &w).unwrap();
        assert_eq!(x.values, s.values);
        assert_eq!(y.values, s.values);
    }

    #[test]
    fn non_square_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        assert!(AffinityMatrix::new(Tensor::zeros(3, 4), PairTag::Current).is_err());
        let w = random_weights(&mut rng, 4, 3);
        let a = random_affinity(&mut rng, 4, PairTag::Current);
        let b = random_affinity(&mut rng, 3, PairTag::Previous);
        assert!(cross_attend(&a, &b, &w).is_err());
        assert!(self_attend(&b, &w).is_err());
    }

    #[test]
    fn zero_weights_refine_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = random_affinity(&mut rng, 6, PairTag::Current);
        let b = random_affinity(&mut rng, 6, PairTag::Previous);
        let w = AttentionWeights::zeros(6, 8);
        let (x, y) = refine(&a, &b, &w, &w, &AffinityConfig::default()).unwrap();
        assert_eq!(x.values, a.values);
        assert_eq!(y.values, b.values);
        let init = AttentionWeights::init(&mut rng, 6, 8);
        let (x, _) = refine(&a, &b, &init, &init, &AffinityConfig::default()).unwrap();
        assert_eq!(x.values, a.values);
    }

    #[test]
    fn refine_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = 5;
        let equivariant = |rng: &mut ChaCha8Rng| {
            let mut w = random_weights(rng, m, 4);
            for proj in [&mut w.q_proj, &mut w.k_proj, &mut w.v_proj] {
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
                *proj = Tensor::from_fn(m, m, |r, c| if r == c { a + b } else { b });
            }
            w
        };
        let ws = equivariant(&mut rng);
        let wc = equivariant(&mut rng);
        let a = random_affinity(&mut rng, m, PairTag::Current);
        let b = random_affinity(&mut rng, m, PairTag::Previous);
        let perm = [3, 0, 4, 1, 2];
        let permute = |x: &AffinityMatrix| x.with_values(Tensor::from_fn(m, m, |r, c| x.values.get(perm[r], perm[c])));
        let cfg = AffinityConfig::default();
        let (x, y) = refine(&a, &b, &ws, &wc, &cfg).unwrap();
        let (px, py) = refine(&permute(&a), &permute(&b), &ws, &wc, &cfg).unwrap();
        for (p, q) in [(&px, &x), (&py, &y)] {
            let expected = permute(q);
            for (u, v) in p.values.data().iter().zip(expected.values.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let m = 4;
        let a = random_affinity(&mut rng, m, PairTag::Current).values;
        let b = random_affinity(&mut rng, m, PairTag::Previous).values;
        let target = Tensor::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        #[derive(Clone)]
        struct Both(AttentionWeights, AttentionWeights);
        impl ParamSet for Both {
            fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
                self.0.visit(f);
                self.1.visit(f);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
                self.0.visit_mut(f);
                self.1.visit_mut(f);
            }
        }
        let params = Both(random_weights(&mut rng, m, 3), random_weights(&mut rng, m, 3));
        let run = |p: &Both, tape: &Tape, train: bool| -> Result<(Var, Vec<Var>)> {
            let (ws, wc) = if train {
                (p.0.map("", &mut bind_param(tape)), p.1.map("", &mut bind_param(tape)))
            } else {
                (p.0.map("", &mut bind_const(tape)), p.1.map("", &mut bind_const(tape)))
            };
            let xa = tape.constant(a.clone());
            let xb = tape.constant(b.clone());
            let r = refine_on(tape, xa, xb, &ws, &wc, &AffinityConfig::default())?;
            let tgt = tape.constant(target.clone());
            let d = tape.sub(r.a_hat_t, tgt)?;
            let sq = tape.mul(d, d);
            let l = tape.add(tape.sum(sq), tape.sum(tape.tanh(r.a_hat_tm1)))?;
            let mut vars = Vec::new();
            ws.for_each("", &mut |_, v: &Var| vars.push(*v));
            wc.for_each("", &mut |_, v: &Var| vars.push(*v));
            Ok((l, vars))
        };
        let tape = Tape::new();
        let (l, vars) = run(&params, &tape, true).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|v| g.get(*v)).collect();
        let report = check_param_gradients(
            &params,
            &analytic,
            |p| {
                let t = Tape::new();
                let (l, _) = run(p, &t, false)?;
                Ok(t.value(l).item())
            },
            &GradCheckOptions { samples_per_tensor: None, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
