//! Ground-truth affinities and training losses.

use serde::{Deserialize, Serialize};

use crate::error::{ModtError, Result};
use crate::geometry::{dist2, Point3};
use crate::numerics::{Tape, Tensor, Var};
use crate::scans::GroundTruthObject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the center term.
    pub center: f64,
    /// Weight of the size term.
    pub size: f64,
    /// Weight of the token objectness term (binary cross-entropy).
    pub objectness: f64,
    /// Weight of the optional `(sin, cos)` yaw term; 0 disables it.
    pub yaw: f64,
    /// Box growth (meters) when deciding whether a token belongs to an object.
    pub containment_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center: 1.0,
            size: 1.0,
            objectness: 1.0,
            yaw: 0.0,
            containment_margin: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("center", self.center),
            ("size", self.size),
            ("objectness", self.objectness),
            ("yaw", self.yaw),
            ("containment_margin", self.containment_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModtError::Config(format!("losses: {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Binary correspondence matrix, at most one 1 per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GtAffinity {
    pub values: Tensor,
    pub valid_rows: usize,
    pub valid_cols: usize,
}

impl GtAffinity {
    pub fn support(&self) -> f64 {
        self.values.sum()
    }

    /// Column of the 1 in row `r`, if any.
    pub fn target(&self, r: usize) -> Option<usize> {
        self.values.row(r).iter().position(|v| *v > 0.0)
    }
}

/// Object containing `p`, nearest center first, ties by list order.
pub fn owning_object<'a>(p: &Point3, objects: &'a [GroundTruthObject], margin: f64) -> Option<&'a GroundTruthObject> {
    objects
        .iter()
        .filter(|o| o.bbox.contains(p, margin))
        .min_by(|a, b| dist2(p, &a.bbox.center).total_cmp(&dist2(p, &b.bbox.center)))
}

/// Marks, for each token at `t` inside an object, the token at `t-1` inside
/// the same track whose box-local position is nearest. `m` is the padded size.
pub fn build_gt_affinity(
    positions_t: &[Point3],
    positions_tm1: &[Point3],
    gt_t: &[GroundTruthObject],
    gt_tm1: &[GroundTruthObject],
    m: usize,
    margin: f64,
) -> Result<GtAffinity> {
    if positions_t.len() > m || positions_tm1.len() > m {
        return Err(ModtError::invalid("token count exceeds affinity size"));
    }
    let mut values = Tensor::zeros(m, m);
    let prev: Vec<Option<&GroundTruthObject>> =
        positions_tm1.iter().map(|p| owning_object(p, gt_tm1, margin)).collect();
    for (d, p) in positions_t.iter().enumerate() {
        let Some(obj) = owning_object(p, gt_t, margin) else {
            continue;
        };
        let local = obj.bbox.to_local(p);
        let mut best: Option<(f64, usize)> = None;
        for (e, q) in positions_tm1.iter().enumerate() {
            let Some(o) = prev[e] else { continue };
            if o.track_id != obj.track_id {
                continue;
            }
            let dd = dist2(&local, &o.bbox.to_local(q));
            if best.is_none_or(|(bd, _)| dd < bd) {
                best = Some((dd, e));
            }
        }
        if let Some((_, e)) = best {
            values.set(d, e, 1.0);
        }
    }
    Ok(GtAffinity {
        values,
        valid_rows: positions_t.len(),
        valid_cols: positions_tm1.len(),
    })
}

/// Masked negative log-likelihood of the row-softmax of `a_hat` over `g`'s
/// support, divided by the support size. Padding columns are excluded from
/// the softmax. Returns `None` when `g` is empty.
pub fn association_loss_on(tape: &Tape, a_hat: Var, g: &GtAffinity) -> Result<Option<Var>> {
    if tape.shape(a_hat) != g.values.shape() {
        return Err(ModtError::invalid("association loss: shape mismatch"));
    }
    let support = g.support();
    if support <= 0.0 {
        return Ok(None);
    }
    let (m, _) = g.values.shape();
    let (rows, cols) = (g.valid_rows, g.valid_cols);
    let mut a = a_hat;
    if rows < m {
        a = tape.gather_rows(a, (0..rows).map(Some).collect())?;
    }
    if cols < m {
        a = tape.slice_cols(a, 0, cols)?;
    }
    let logp = tape.log_softmax_rows(a)?;
    let mask = tape.constant(Tensor::from_fn(rows, cols, |r, c| g.values.get(r, c)));
    let picked = tape.mul(logp, mask);
    let total = tape.sum(picked);
    Ok(Some(tape.scale(total, -1.0 / support)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// False when there was nothing to supervise and `value` is 0.
    pub supervised: bool,
}

pub fn association_loss(a_hat: &Tensor, g: &GtAffinity) -> Result<LossTerm> {
    let tape = Tape::new();
    let a = tape.constant(a_hat.clone());
    Ok(match association_loss_on(&tape, a, g)? {
        Some(v) => LossTerm {
            value: tape.value(v).item(),
            supervised: true,
        },
        None => LossTerm {
            value: 0.0,
            supervised: false,
        },
    })
}

/// Mean over rows of the row-wise l1 distance between `pred` and `target`.
pub fn l1_rows_on(tape: &Tape, pred: Var, target: &Tensor) -> Result<Option<Var>> {
    if tape.shape(pred) != target.shape() {
        return Err(ModtError::invalid("l1 loss: shape mismatch"));
    }
    if target.rows() == 0 {
        return Ok(None);
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let s = tape.sum(tape.abs(d));
    Ok(Some(tape.scale(s, 1.0 / target.rows() as f64)))
}

fn l1_pairs(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<LossTerm> {
    if pred.len() != target.len() {
        return Err(ModtError::invalid("matched lists differ in length"));
    }
    if pred.is_empty() {
        return Ok(LossTerm {
            value: 0.0,
            supervised: false,
        });
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|i| (p[i] - t[i]).abs()).sum::<f64>())
        .sum();
    Ok(LossTerm {
        value: total / pred.len() as f64,
        supervised: true,
    })
}

pub fn center_loss(pred: &[Point3], gt: &[Point3]) -> Result<LossTerm> {
    l1_pairs(pred, gt)
}

/// Same as [`center_loss`] over decoded `(w, l, h)` in meters.
pub fn size_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<LossTerm> {
    l1_pairs(pred, gt)
}

/// `L_a + w_c L_c + w_b L_b`.
pub fn total_loss(l_a: f64, l_c: f64, l_b: f64, w: &LossWeights) -> f64 {
    l_a + w.center * l_c + w.size * l_b
}

/// Mean binary cross-entropy of logits against 0/1 targets.
pub fn bce_logits_on(tape: &Tape, logits: Var, targets: &Tensor) -> Result<Option<Var>> {
    if tape.shape(logits) != targets.shape() {
        return Err(ModtError::invalid("bce: shape mismatch"));
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let y = tape.constant(targets.clone());
    let sp = tape.softplus(logits);
    let yz = tape.mul(logits, y);
    let l = tape.sub(sp, yz)?;
    Ok(Some(tape.mean(l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use crate::numerics::{finite_difference_gradient, gradient_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn object(id: u32, center: Point3, size: f64) -> GroundTruthObject {
        GroundTruthObject {
            track_id: id,
            bbox: Box3D { center, size: [size; 3], yaw: 0.0 },
        }
    }

    /// Brute-force reference: per row, scan every column and keep the first
    /// minimum among same-track candidates.
    fn oracle_gt(
        t: &[Point3],
        tm1: &[Point3],
        gt_t: &[GroundTruthObject],
        gt_tm1: &[GroundTruthObject],
        m: usize,
    ) -> Vec<Vec<f64>> {
        let owner = |p: &Point3, objs: &[GroundTruthObject]| -> Option<usize> {
            let mut best: Option<usize> = None;
            for (i, o) in objs.iter().enumerate() {
                if !o.bbox.contains(p, 0.1) {
                    continue;
                }
                match best {
                    Some(b) if dist2(p, &objs[b].bbox.center) <= dist2(p, &o.bbox.center) => {}
                    _ => best = Some(i),
                }
            }
            best
        };
        let mut g = vec![vec![0.0; m]; m];
        for (d, p) in t.iter().enumerate() {
            let Some(oi) = owner(p, gt_t) else { continue };
            let o = &gt_t[oi];
            let lp = o.bbox.to_local(p);
            let mut best = (f64::INFINITY, usize::MAX);
            for (e, q) in tm1.iter().enumerate() {
                if let Some(qi) = owner(q, gt_tm1) {
                    let oq = &gt_tm1[qi];
                    if oq.track_id == o.track_id {
                        let lq = oq.bbox.to_local(q);
                        let dd = (0..3).map(|i| (lp[i] - lq[i]).powi(2)).sum::<f64>();
                        if dd < best.0 {
                            best = (dd, e);
                        }
                    }
                }
            }
            if best.1 != usize::MAX {
                g[d][best.1] = 1.0;
            }
        }
        g
    }

    #[test]
    fn static_object_gives_identity_like_matching() {
        let pos = vec![[0.1, 0.0, 0.0], [-0.2, 0.1, 0.0], [0.0, -0.3, 0.2], [0.3, 0.3, -0.1]];
        let obj = vec![object(7, [0.0; 3], 1.0)];
        let g = build_gt_affinity(&pos, &pos, &obj, &obj, 4, 0.1).unwrap();
        assert_eq!(g.values, Tensor::identity(4));
        // Shuffled previous order moves the ones accordingly.
        let shuffled = vec![pos[2], pos[0], pos[3], pos[1]];
        let g = build_gt_affinity(&pos, &shuffled, &obj, &obj, 4, 0.1).unwrap();
        let expected = oracle_gt(&pos, &shuffled, &obj, &obj, 4);
        assert_eq!(g.target(0), Some(1));
        for r in 0..4 {
            assert_eq!(g.values.row(r), expected[r].as_slice());
        }
    }

    #[test]
    fn disjoint_objects_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = object(1, [0.0; 3], 1.0);
        let b0 = object(2, [5.0, 0.0, 0.0], 1.0);
        let a1 = object(1, [0.3, 0.0, 0.0], 1.0);
        let b1 = object(2, [5.0, 0.4, 0.0], 1.0);
        for _ in 0..20 {
            let mut sample = |c: Point3, n: usize| -> Vec<Point3> {
                (0..n).map(|_| [c[0] + rng.random_range(-0.45..0.45), c[1] + rng.random_range(-0.45..0.45), c[2] + rng.random_range(-0.45..0.45)]).collect()
            };
            let mut t = sample(a1.bbox.center, 3);
            t.extend(sample(b1.bbox.center, 3));
            t.push([20.0, 20.0, 0.0]);
            let mut tm1 = sample(b0.bbox.center, 2);
            tm1.extend(sample(a0.bbox.center, 4));
            let gt_t = vec![a1.clone(), b1.clone()];
            let gt_tm1 = vec![a0.clone(), b0.clone()];
            let g = build_gt_affinity(&t, &tm1, &gt_t, &gt_tm1, 8, 0.1).unwrap();
            let expected = oracle_gt(&t, &tm1, &gt_t, &gt_tm1, 8);
            for r in 0..8 {
                assert_eq!(g.values.row(r), expected[r].as_slice());
                assert!(g.values.row(r).iter().sum::<f64>() <= 1.0);
            }
            // Block structure: object 1 tokens at t map into columns 2..6.
            for r in 0..3 {
                assert!(matches!(g.target(r), Some(c) if (2..6).contains(&c)));
            }
            for r in 3..6 {
                assert!(matches!(g.target(r), Some(c) if c < 2));
            }
            assert_eq!(g.target(6), None);
            assert_eq!(g.target(7), None);
        }
    }

    #[test]
    fn no_objects_zero_matrix() {
        let t = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let g = build_gt_affinity(&t, &t, &[], &[], 2, 0.1).unwrap();
        assert_eq!(g.values, Tensor::zeros(2, 2));
        let term = association_loss(&Tensor::zeros(2, 2), &g).unwrap();
        assert!(!term.supervised);
        assert_eq!(term.value, 0.0);
    }

    fn gt(m: usize, ones: &[(usize, usize)]) -> GtAffinity {
        let mut v = Tensor::zeros(m, m);
        for &(r, c) in ones {
            v.set(r, c, 1.0);
        }
        GtAffinity { values: v, valid_rows: m, valid_cols: m }
    }

    #[test]
    fn association_loss_examples() {
        // Near one-hot rows give a loss near zero.
        let a = Tensor::from_fn(3, 3, |r, c| if r == c { 60.0 } else { 0.0 });
        let l = association_loss(&a, &gt(3, &[(0, 0), (1, 1), (2, 2)])).unwrap();
        assert!(l.supervised && l.value.abs() < 1e-20);
        // Two-column row with equal scores: probability 1/2.
        let a = Tensor::from_rows(&[[0.3, 0.3], [1.0, -2.0]]).unwrap();
        let l = association_loss(&a, &gt(2, &[(0, 1)])).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn association_loss_ignores_extra_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let l3 = association_loss(&a, &gt(3, &[(0, 2), (2, 1)])).unwrap().value;
        // Doubling M: new rows carry no supervision, new columns are padding.
        let big = Tensor::from_fn(6, 6, |r, c| if r < 3 && c < 3 { a.get(r, c) } else { rng.random_range(-1.0..1.0) });
        let mut g = gt(6, &[(0, 2), (2, 1)]);
        g.valid_rows = 3;
        g.valid_cols = 3;
        let l6 = association_loss(&big, &g).unwrap().value;
        assert!((l3 - l6).abs() < 1e-14);
    }

    #[test]
    fn association_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = Tensor::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = gt(4, &[(0, 1), (1, 1), (3, 0)]);
        let tape = Tape::new();
        let a = tape.param(a0.clone());
        let l = association_loss_on(&tape, a, &g).unwrap().unwrap();
        let grad = tape.backward(l).unwrap().get(a);
        let fd = finite_difference_gradient(|x| Ok(association_loss(x, &g)?.value), &a0, 1e-5).unwrap();
        for (x, y) in grad.data().iter().zip(fd.data()) {
            assert!(gradient_error(*x, *y, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(center_loss(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap().value, 0.0);
        assert_eq!(center_loss(&[[1.0, -2.0, 2.0]], &[[0.0; 3]]).unwrap().value, 5.0);
        let l = center_loss(&[[1.0, 1.0, 1.0], [0.0, 5.0, 0.0]], &[[0.0; 3], [0.0; 3]]).unwrap();
        assert_eq!(l.value, 4.0);
        let s = size_loss(&[[0.6, 0.8, 1.5]], &[[0.5, 0.6, 1.8]]).unwrap();
        assert!((s.value - 0.6).abs() < 1e-12);
        assert!(!center_loss(&[], &[]).unwrap().supervised);
        assert!(center_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn l1_on_tape_matches_plain() {
        let tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[[1.0, 1.0, 1.0], [0.0, 5.0, 0.0]]).unwrap());
        let l = l1_rows_on(&tape, p, &Tensor::zeros(2, 3)).unwrap().unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        let mut w = LossWeights { center: 0.0, size: 0.0, ..Default::default() };
        assert_eq!(total_loss(1.7, 3.0, 4.0, &w), 1.7);
        w.center = 0.5;
        w.size = 1.0;
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w), 5.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
    }

    #[test]
    fn bce_matches_closed_form() {
        let tape = Tape::new();
        let z = tape.param(Tensor::from_rows(&[[0.0], [2.0]]).unwrap());
        let l = bce_logits_on(&tape, z, &Tensor::from_rows(&[[1.0], [0.0]]).unwrap()).unwrap().unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }
}
