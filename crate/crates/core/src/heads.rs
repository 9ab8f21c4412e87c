//! Offset and detection heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSet, FEATURE_WIDTH};
use crate::error::{ModtError, Result};
use crate::geometry::{dist2, wrap_angle, Box3D, Point3};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{bind_const, init_linear, param_group};
use crate::scans::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub confidence_threshold: f64,
    /// Survivors closer than this (meters) are merged into the more confident one.
    pub nms_distance: f64,
    /// Points farther than this from every token get a zero offset.
    pub background_radius: f64,
    /// Affinity rows are divided by this before the offset softmax.
    pub offset_temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            nms_distance: 1.0,
            background_radius: 2.0,
            offset_temperature: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(ModtError::Config("heads: confidence_threshold must lie in [0, 1]".into()));
        }
        if !(self.nms_distance >= 0.0) || !(self.background_radius >= 0.0) {
            return Err(ModtError::Config("heads: distances must be >= 0".into()));
        }
        if !(self.offset_temperature > 0.0 && self.offset_temperature.is_finite()) {
            return Err(ModtError::Config("heads: offset_temperature must be positive".into()));
        }
        Ok(())
    }
}

param_group! {
    pub struct HeadParams {
        /// Learned residual added to the affinity-derived token offset.
        offset_w, offset_b,
        det_w1, det_b1,
        center_w, center_b,
        /// Log-scale size regression.
        size_w, size_b,
        /// `(sin, cos)` yaw regression.
        yaw_w, yaw_b,
        conf_w, conf_b,
    }
}

impl HeadParams<Tensor> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let w = FEATURE_WIDTH;
        let small = |rng: &mut dyn rand::RngCore, cols| init_linear(rng, w, cols).map(|v| v * 0.1);
        Self {
            offset_w: Tensor::zeros(w, 3),
            offset_b: Tensor::zeros(1, 3),
            det_w1: init_linear(rng, w, w),
            det_b1: Tensor::zeros(1, w),
            center_w: small(rng, 3),
            center_b: Tensor::zeros(1, 3),
            size_w: small(rng, 3),
            size_b: Tensor::zeros(1, 3),
            yaw_w: small(rng, 2),
            yaw_b: Tensor::new(1, 2, vec![0.0, 1.0]).expect("finite"),
            conf_w: small(rng, 1),
            conf_b: Tensor::zeros(1, 1),
        }
    }
}

/// Raw per-token regressions of the detection head.
pub struct BoxOutputs {
    pub center_residual: Var,
    pub log_size: Var,
    pub yaw_sin_cos: Var,
    pub conf_logit: Var,
}

pub fn boxes_on(tape: &Tape, features: Var, p: &HeadParams<Var>) -> Result<BoxOutputs> {
    let h = tape.matmul(features, p.det_w1)?;
    let h = tape.add_row(h, p.det_b1)?;
    let h = tape.tanh(h);
    let lin = |w, b| -> Result<Var> {
        let y = tape.matmul(h, w)?;
        tape.add_row(y, b)
    };
    Ok(BoxOutputs {
        center_residual: lin(p.center_w, p.center_b)?,
        log_size: lin(p.size_w, p.size_b)?,
        yaw_sin_cos: lin(p.yaw_w, p.yaw_b)?,
        conf_logit: lin(p.conf_w, p.conf_b)?,
    })
}

/// Token offsets from scan `t` back to `t-1`.
///
/// `a_hat` is the refined `M x M` affinity; only its first `rows` rows and
/// `cols` columns belong to real tokens.
pub fn token_offsets_on(
    tape: &Tape,
    features_t: Var,
    a_hat: Var,
    positions_t: &[Point3],
    positions_tm1: &[Point3],
    p: &HeadParams<Var>,
    temperature: f64,
) -> Result<Var> {
    let rows = positions_t.len();
    let cols = positions_tm1.len();
    let (m, n) = tape.shape(a_hat);
    if rows > m || cols > n || tape.shape(features_t).0 != rows {
        return Err(ModtError::invalid("offset head: token counts do not fit the affinity"));
    }
    let a = if rows < m { tape.gather_rows(a_hat, (0..rows).map(Some).collect())? } else { a_hat };
    let a = if cols < n { tape.slice_cols(a, 0, cols)? } else { a };
    let a = if temperature == 1.0 { a } else { tape.scale(a, 1.0 / temperature) };
    let weights = tape.softmax_rows(a)?;
    let prev = tape.constant(Tensor::from_fn(cols, 3, |r, c| positions_tm1[r][c]));
    let cur = tape.constant(Tensor::from_fn(rows, 3, |r, c| positions_t[r][c]));
    let target = tape.matmul(weights, prev)?;
    let base = tape.sub(target, cur)?;
    let res = tape.matmul(features_t, p.offset_w)?;
    let res = tape.add_row(res, p.offset_b)?;
    tape.add(base, res)
}

/// Per-point displacement from scan `t` back to `t-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub frame: usize,
    pub points: Vec<Point3>,
    pub displacements: Vec<Point3>,
    /// Set when the frame had no tokens; all displacements are zero.
    pub skipped: bool,
}

impl OffsetField {
    pub fn zeros(cloud: &PointCloud, skipped: bool) -> Self {
        Self {
            frame: cloud.frame,
            points: cloud.points.clone(),
            displacements: vec![[0.0; 3]; cloud.len()],
            skipped,
        }
    }

    /// Offset of the point nearest to `p` (zero for an empty field).
    pub fn offset_near(&self, p: &Point3) -> Point3 {
        match nearest_index(&self.points, p) {
            Some(i) => self.displacements[i],
            None => [0.0; 3],
        }
    }
}

fn nearest_index(points: &[Point3], p: &Point3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, q) in points.iter().enumerate() {
        let d = dist2(p, q);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Assigns each point the offset of its nearest token, or zero beyond
/// `background_radius`.
pub fn scatter_offsets(
    cloud: &PointCloud,
    token_positions: &[Point3],
    token_offsets: &[Point3],
    background_radius: f64,
) -> OffsetField {
    let r2 = background_radius * background_radius;
    let displacements = cloud
        .points
        .iter()
        .map(|p| match nearest_index(token_positions, p) {
            Some(i) if dist2(p, &token_positions[i]) <= r2 => token_offsets[i],
            _ => [0.0; 3],
        })
        .collect();
    OffsetField {
        frame: cloud.frame,
        points: cloud.points.clone(),
        displacements,
        skipped: token_positions.is_empty(),
    }
}

pub fn predict_offsets(
    tokens_t: &TokenSet,
    tokens_tm1: &TokenSet,
    a_hat: &Tensor,
    params: &HeadParams,
    cloud_t: &PointCloud,
    cfg: &HeadConfig,
) -> Result<OffsetField> {
    if tokens_t.is_empty() || tokens_tm1.is_empty() {
        return Ok(OffsetField::zeros(cloud_t, true));
    }
    let tape = Tape::new();
    let p = params.map("", &mut bind_const(&tape));
    let f = tape.constant(tokens_t.features.clone());
    let a = tape.constant(a_hat.clone());
    let off = token_offsets_on(&tape, f, a, &tokens_t.positions, &tokens_tm1.positions, &p, cfg.offset_temperature)?;
    let off = tape.value(off);
    let rows: Vec<Point3> = (0..off.rows()).map(|r| [off.get(r, 0), off.get(r, 1), off.get(r, 2)]).collect();
    Ok(scatter_offsets(cloud_t, &tokens_t.positions, &rows, cfg.background_radius))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub embedding: Vec<f64>,
    pub confidence: f64,
    /// Token the detection was regressed from.
    pub token: usize,
}

pub fn decode_size(log_size: [f64; 3]) -> [f64; 3] {
    log_size.map(f64::exp)
}

pub fn decode_yaw(sin: f64, cos: f64) -> f64 {
    wrap_angle(sin.atan2(cos))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes every token into a detection, without thresholding.
pub fn decode_boxes(tokens: &TokenSet, params: &HeadParams) -> Result<Vec<Detection>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let p = params.map("", &mut bind_const(&tape));
    let f = tape.constant(tokens.features.clone());
    let out = boxes_on(&tape, f, &p)?;
    let (c, s, y, k) = (
        tape.value(out.center_residual),
        tape.value(out.log_size),
        tape.value(out.yaw_sin_cos),
        tape.value(out.conf_logit),
    );
    Ok((0..tokens.len())
        .map(|i| {
            let pos = tokens.positions[i];
            Detection {
                bbox: Box3D {
                    center: [pos[0] + c.get(i, 0), pos[1] + c.get(i, 1), pos[2] + c.get(i, 2)],
                    size: decode_size([s.get(i, 0), s.get(i, 1), s.get(i, 2)]),
                    yaw: decode_yaw(y.get(i, 0), y.get(i, 1)),
                },
                embedding: tokens.features.row(i).to_vec(),
                confidence: sigmoid(k.get(i, 0)),
                token: i,
            }
        })
        .collect())
}

/// Drops detections below the threshold, then greedily keeps the most
/// confident ones (ties by token index) and merges any within `nms_distance`.
pub fn suppress(mut dets: Vec<Detection>, cfg: &HeadConfig) -> Vec<Detection> {
    dets.retain(|d| d.confidence >= cfg.confidence_threshold);
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.token.cmp(&b.token)));
    let r2 = cfg.nms_distance * cfg.nms_distance;
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| dist2(&k.bbox.center, &d.bbox.center) >= r2) {
            kept.push(d);
        }
    }
    kept
}

pub fn predict_boxes(tokens: &TokenSet, params: &HeadParams, cfg: &HeadConfig) -> Result<Vec<Detection>> {
    Ok(suppress(decode_boxes(tokens, params)?, cfg))
}
