//! Frame-by-frame inference: encoder, affinities, refinement, heads and the
//! tracking cascade.

use std::fmt::Write as _;

use crate::affinity::{build_affinity_sized, refine, PairTag};
use crate::checkpoint::Checkpoint;
use crate::encoder::{encode_with, TokenSet};
use crate::error::Result;
use crate::heads::{predict_boxes, predict_offsets, Detection, OffsetField};
use crate::model::{ModelConfig, ModelParams};
use crate::scans::PointCloud;
use crate::tracker::{Assignment, Track, TrackerConfig, TrackerState};

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub offsets: OffsetField,
    pub assignments: Vec<Assignment>,
}

/// Streaming tracker over a sequence of scans.
///
/// The two most recent nonempty token sets are kept. Until two earlier
/// scans exist, the earliest available one stands in for the missing ones.
pub struct Pipeline {
    params: ModelParams,
    model: ModelConfig,
    tracker_cfg: TrackerConfig,
    /// `[t-1, t-2]`, most recent first.
    recent: Vec<TokenSet>,
    state: TrackerState,
}

impl Pipeline {
    pub fn new(params: ModelParams, model: ModelConfig, tracker_cfg: TrackerConfig) -> Result<Self> {
        model.validate()?;
        tracker_cfg.validate()?;
        params.check_shapes(&model)?;
        Ok(Self {
            params,
            model,
            tracker_cfg,
            recent: Vec::new(),
            state: TrackerState::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.params.clone(), ck.config.model(), ck.config.tracker.clone())
    }

    /// Detections and offsets for one scan, without touching tracker state.
    fn infer(&self, cloud: &PointCloud, tokens: &TokenSet) -> Result<(Vec<Detection>, OffsetField)> {
        let m = self.model.encoder.tokens;
        let tm1 = self.recent.first().unwrap_or(tokens);
        let tm2 = self.recent.get(1).or(self.recent.first()).unwrap_or(tokens);
        let a_t = build_affinity_sized(tokens, tm1, PairTag::Current, m)?;
        let a_tm1 = build_affinity_sized(tm1, tm2, PairTag::Previous, m)?;
        let (a_hat_t, _) = refine(&a_t, &a_tm1, &self.params.self_attn, &self.params.cross_attn, &self.model.affinity)?;
        let offsets = predict_offsets(tokens, tm1, &a_hat_t.values, &self.params.heads, cloud, &self.model.heads)?;
        let detections = predict_boxes(tokens, &self.params.heads, &self.model.heads)?;
        Ok((detections, offsets))
    }

    /// Processes the next scan; frame indices must increase. An empty scan
    /// yields no detections but still ages the active tracks.
    pub fn process(&mut self, cloud: &PointCloud) -> Result<FrameOutput> {
        let (detections, offsets) = if cloud.is_empty() {
            (Vec::new(), OffsetField::zeros(cloud, true))
        } else {
            let tokens = encode_with(cloud, &self.params.encoder, &self.model.encoder.capped(cloud.len()), false)?;
            let out = self.infer(cloud, &tokens)?;
            self.recent.insert(0, tokens);
            self.recent.truncate(2);
            out
        };
        let assignments = self.state.step(cloud.frame, &detections, &offsets, &self.tracker_cfg)?;
        Ok(FrameOutput {
            frame: cloud.frame,
            detections,
            offsets,
            assignments,
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn finish(self) -> Vec<Track> {
        self.state.into_tracks()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub tracks: Vec<Track>,
    pub frames: Vec<FrameOutput>,
}

pub fn track_sequence(ck: &Checkpoint, clouds: &[PointCloud]) -> Result<TrackRun> {
    let mut p = Pipeline::from_checkpoint(ck)?;
    let mut frames = Vec::with_capacity(clouds.len());
    for c in clouds {
        frames.push(p.process(c)?);
    }
    Ok(TrackRun {
        tracks: p.finish(),
        frames,
    })
}

/// One line per detection: `frame conf cx cy cz w l h yaw`.
pub fn format_detections(frames: &[FrameOutput]) -> String {
    let mut s = String::new();
    for f in frames {
        for d in &f.detections {
            let b = &d.bbox;
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {}",
                f.frame, d.confidence, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
            );
        }
    }
    s
}
