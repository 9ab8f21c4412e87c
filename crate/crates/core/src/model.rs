//! The full network: encoder, affinity refinement and heads, with the
//! training loss of one three-scan window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{affinity_on, refine_on, AffinityConfig, AttentionWeights, RefinedPair};
use crate::encoder::{encode_on, EncodedTokens, EncoderConfig, EncoderParams};
use crate::error::{ModtError, Result};
use crate::heads::{boxes_on, BoxOutputs, HeadConfig, HeadParams};
use crate::losses::{association_loss_on, bce_logits_on, build_gt_affinity, l1_rows_on, owning_object, LossWeights};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::params::{bind_const, bind_param, ParamSet};
use crate::scans::FrameTriplet;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub affinity: AffinityConfig,
    pub heads: HeadConfig,
    pub losses: LossWeights,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.affinity.validate()?;
        self.heads.validate()?;
        self.losses.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub self_attn: AttentionWeights<T>,
    pub cross_attn: AttentionWeights<T>,
    pub heads: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map("encoder", f),
            self_attn: self.self_attn.map("self_attn", f),
            cross_attn: self.cross_attn.map("cross_attn", f),
            heads: self.heads.map("heads", f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.encoder.for_each("encoder", f);
        self.self_attn.for_each("self_attn", f);
        self.cross_attn.for_each("cross_attn", f);
        self.heads.for_each("heads", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.encoder.for_each_mut("encoder", f);
        self.self_attn.for_each_mut("self_attn", f);
        self.cross_attn.for_each_mut("cross_attn", f);
        self.heads.for_each_mut("heads", f);
    }
}

impl<T> ModelParams<T> {
    /// All leaves in visiting order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = self.encoder.leaves();
        out.extend(self.self_attn.leaves());
        out.extend(self.cross_attn.leaves());
        out.extend(self.heads.leaves());
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.leaves_mut();
        out.extend(self.self_attn.leaves_mut());
        out.extend(self.cross_attn.leaves_mut());
        out.extend(self.heads.leaves_mut());
        out
    }
}

impl ParamSet for ModelParams<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.for_each(&mut |n: &str, t: &Tensor| f(n, t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.for_each_mut(&mut |n: &str, t: &mut Tensor| f(n, t));
    }
}

impl ModelParams<Tensor> {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let m = cfg.encoder.tokens;
        let c = cfg.affinity.conv_channels;
        Self {
            encoder: EncoderParams::init(rng),
            self_attn: AttentionWeights::init(rng, m, c),
            cross_attn: AttentionWeights::init(rng, m, c),
            heads: HeadParams::init(rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(&mut |_, t: &mut Tensor| *t = Tensor::zeros(t.rows(), t.cols()));
        z
    }

    /// Collects the gradient of every bound parameter.
    pub fn gradients(bound: &ModelParams<Var>, grads: &Gradients) -> Self {
        bound.map(&mut |_, v: &Var| grads.get(*v))
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), cfg);
        let mut expected = Vec::new();
        reference.visit(&mut |n, t| expected.push((n.to_string(), t.shape())));
        let mut i = 0;
        let mut err = None;
        self.visit(&mut |n, t| {
            match expected.get(i) {
                Some((en, es)) if en == n && *es == t.shape() => {}
                _ if err.is_none() => err = Some(format!("parameter {n} has unexpected shape {:?}", t.shape())),
                _ => {}
            }
            i += 1;
        });
        match err {
            Some(e) => Err(ModtError::Config(e)),
            None if i != expected.len() => Err(ModtError::Config("parameter count mismatch".into())),
            None => Ok(()),
        }
    }
}

/// Tape handles of one window's forward pass.
pub struct WindowForward {
    pub tokens: [EncodedTokens; 3],
    pub raw_t: Var,
    pub raw_tm1: Var,
    pub refined: RefinedPair,
    pub boxes: BoxOutputs,
}

/// Records encoder, affinities, refinement and detection head for a window.
/// Returns `None` when a scan of the window is empty.
pub fn forward_window_on(
    tape: &Tape,
    p: &ModelParams<Var>,
    window: &FrameTriplet<'_>,
    cfg: &ModelConfig,
) -> Result<Option<WindowForward>> {
    let frames = [window.current, window.previous, window.before];
    if frames.iter().any(|f| f.cloud.is_empty()) {
        return Ok(None);
    }
    let m = cfg.encoder.tokens;
    let enc = |i: usize| encode_on(tape, &frames[i].cloud, &p.encoder, &cfg.encoder.capped(frames[i].cloud.len()), false);
    let tokens = [enc(0)?, enc(1)?, enc(2)?];
    let raw_t = affinity_on(tape, tokens[0].features, tokens[1].features, m)?;
    let raw_tm1 = affinity_on(tape, tokens[1].features, tokens[2].features, m)?;
    let refined = refine_on(tape, raw_t, raw_tm1, &p.self_attn, &p.cross_attn, &cfg.affinity)?;
    let boxes = boxes_on(tape, tokens[0].features, &p.heads)?;
    Ok(Some(WindowForward {
        tokens,
        raw_t,
        raw_tm1,
        refined,
        boxes,
    }))
}

/// Loss components of one window; `None` where nothing was supervised.
pub struct LossParts {
    pub total: Var,
    pub association: Option<Var>,
    pub center: Option<Var>,
    pub size: Option<Var>,
    pub objectness: Option<Var>,
    pub yaw: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub association: f64,
    pub center: f64,
    pub size: f64,
    pub objectness: f64,
    pub yaw: f64,
}

impl LossBreakdown {
    /// The association + center + size part, without extension terms.
    pub fn core(&self, w: &LossWeights) -> f64 {
        crate::losses::total_loss(self.association, self.center, self.size, w)
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, k: f64) {
        self.total += k * o.total;
        self.association += k * o.association;
        self.center += k * o.center;
        self.size += k * o.size;
        self.objectness += k * o.objectness;
        self.yaw += k * o.yaw;
    }
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossBreakdown {
            total: tape.value(self.total).item(),
            association: v(self.association),
            center: v(self.center),
            size: v(self.size),
            objectness: v(self.objectness),
            yaw: v(self.yaw),
        }
    }
}

fn mean_of(tape: &Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

pub fn window_loss_on(
    tape: &Tape,
    p: &ModelParams<Var>,
    window: &FrameTriplet<'_>,
    cfg: &ModelConfig,
) -> Result<Option<LossParts>> {
    let Some(fwd) = forward_window_on(tape, p, window, cfg)? else {
        return Ok(None);
    };
    let m = cfg.encoder.tokens;
    let w = &cfg.losses;
    let [tok_t, tok_tm1, tok_tm2] = &fwd.tokens;
    let g_t = build_gt_affinity(
        &tok_t.positions,
        &tok_tm1.positions,
        &window.current.objects,
        &window.previous.objects,
        m,
        w.containment_margin,
    )?;
    let g_tm1 = build_gt_affinity(
        &tok_tm1.positions,
        &tok_tm2.positions,
        &window.previous.objects,
        &window.before.objects,
        m,
        w.containment_margin,
    )?;
    let mut assoc = Vec::new();
    let mut pairs = vec![(fwd.refined.a_hat_t, &g_t), (fwd.refined.a_hat_tm1, &g_tm1)];
    if cfg.affinity.supervise_intermediate {
        pairs.push((fwd.refined.s_t, &g_t));
        pairs.push((fwd.refined.s_tm1, &g_tm1));
    }
    for (a, g) in pairs {
        if let Some(l) = association_loss_on(tape, a, g)? {
            assoc.push(l);
        }
    }
    let association = mean_of(tape, &assoc)?;

    let mut idx = Vec::new();
    let mut centers = Vec::new();
    let mut sizes = Vec::new();
    let mut yaws = Vec::new();
    let mut present = Vec::new();
    for (i, pos) in tok_t.positions.iter().enumerate() {
        let owner = owning_object(pos, &window.current.objects, w.containment_margin);
        present.push(if owner.is_some() { 1.0 } else { 0.0 });
        if let Some(o) = owner {
            idx.push(Some(i));
            centers.extend((0..3).map(|k| o.bbox.center[k] - pos[k]));
            sizes.extend_from_slice(&o.bbox.size);
            yaws.extend_from_slice(&[o.bbox.yaw.sin(), o.bbox.yaw.cos()]);
        }
    }
    let r = idx.len();
    let (center, size, yaw) = if r == 0 {
        (None, None, None)
    } else {
        let res = tape.gather_rows(fwd.boxes.center_residual, idx.clone())?;
        let center = l1_rows_on(tape, res, &Tensor::new(r, 3, centers)?)?;
        let ls = tape.gather_rows(fwd.boxes.log_size, idx.clone())?;
        let size = l1_rows_on(tape, tape.exp(ls), &Tensor::new(r, 3, sizes)?)?;
        let yaw = if w.yaw > 0.0 {
            let sc = tape.gather_rows(fwd.boxes.yaw_sin_cos, idx)?;
            l1_rows_on(tape, sc, &Tensor::new(r, 2, yaws)?)?
        } else {
            None
        };
        (center, size, yaw)
    };
    let objectness = bce_logits_on(tape, fwd.boxes.conf_logit, &Tensor::new(present.len(), 1, present)?)?;

    let mut total = tape.constant(Tensor::scalar(0.0));
    for (term, weight) in [(association, 1.0), (center, w.center), (size, w.size), (objectness, w.objectness), (yaw, w.yaw)] {
        if let Some(t) = term {
            if weight != 0.0 {
                let scaled = tape.scale(t, weight);
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(Some(LossParts {
        total,
        association,
        center,
        size,
        objectness,
        yaw,
    }))
}

/// Loss value and parameter gradients of one window.
pub fn window_gradients(
    params: &ModelParams,
    window: &FrameTriplet<'_>,
    cfg: &ModelConfig,
) -> Result<Option<(LossBreakdown, ModelParams)>> {
    let tape = Tape::new();
    let bound = params.map(&mut bind_param(&tape));
    let Some(parts) = window_loss_on(&tape, &bound, window, cfg)? else {
        return Ok(None);
    };
    let grads = tape.backward(parts.total)?;
    Ok(Some((parts.values(&tape), ModelParams::gradients(&bound, &grads))))
}

/// Loss value only, on a constant-bound tape.
pub fn window_loss(params: &ModelParams, window: &FrameTriplet<'_>, cfg: &ModelConfig) -> Result<Option<LossBreakdown>> {
    let tape = Tape::new();
    let bound = params.map(&mut bind_const(&tape));
    Ok(window_loss_on(&tape, &bound, window, cfg)?.map(|p| p.values(&tape)))
}
