//! Greedy association cascade that links detections into tracklets.
//!
//! Per frame: (1) each detection's center plus its tracking offset predicts
//! where the object was one scan earlier, and detections are matched to
//! tracks whose last center lies within `r1` of that prediction, closest
//! pairs first; (2) leftovers retry with `r2`; (3) leftovers match
//! remaining tracks by embedding cosine `>= sim_min`, most similar first;
//! (4) anything still unmatched starts a new track. Tracks unmatched for
//! more than `max_misses` consecutive frames are terminated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ModtError, Result};
use crate::geometry::{add, cosine, dist, Box3D, Point3};
use crate::heads::{Detection, OffsetField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub r1: f64,
    pub r2: f64,
    pub sim_min: f64,
    pub max_misses: usize,
    /// Weight of the old embedding in the moving average.
    pub ema: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 3.0,
            sim_min: 0.7,
            max_misses: 3,
            ema: 0.9,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r1 <= self.r2) {
            return Err(ModtError::Config("tracker: need 0 < r1 <= r2".into()));
        }
        if !(self.sim_min > -1.0 && self.sim_min < 1.0) {
            return Err(ModtError::Config("tracker: sim_min must lie in (-1, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(ModtError::Config("tracker: ema must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Terminated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedBox {
    pub frame: usize,
    pub bbox: Box3D,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub history: Vec<TrackedBox>,
    pub embedding: Vec<f64>,
    pub misses: usize,
    pub status: TrackStatus,
}

impl Track {
    pub fn last_center(&self) -> Point3 {
        self.history.last().map(|h| h.bbox.center).unwrap_or([0.0; 3])
    }
}

/// Which cascade stage produced a match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchStage {
    Near,
    Expanded,
    Embedding,
    New,
}

/// Outcome for one detection in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub detection: usize,
    pub track_id: u32,
    pub stage: MatchStage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackerState {
    pub active: Vec<Track>,
    pub terminated: Vec<Track>,
    pub next_id: u32,
    /// Frame index of the last step, if any.
    pub frame: Option<usize>,
}

impl TrackerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances by one frame. Returns one assignment per detection, in
    /// detection order.
    pub fn step(
        &mut self,
        frame: usize,
        dets: &[Detection],
        offsets: &OffsetField,
        cfg: &TrackerConfig,
    ) -> Result<Vec<Assignment>> {
        if let Some(prev) = self.frame {
            if frame <= prev {
                return Err(ModtError::invalid(format!("frame {frame} does not follow frame {prev}")));
            }
        }
        self.frame = Some(frame);
        let mut det_track: Vec<Option<(usize, MatchStage)>> = vec![None; dets.len()];
        let mut track_taken = vec![false; self.active.len()];

        let predicted: Vec<Point3> = dets
            .iter()
            .map(|d| add(&d.bbox.center, &offsets.offset_near(&d.bbox.center)))
            .collect();
        for (radius, stage) in [(cfg.r1, MatchStage::Near), (cfg.r2, MatchStage::Expanded)] {
            let mut pairs = Vec::new();
            for (i, p) in predicted.iter().enumerate() {
                if det_track[i].is_some() {
                    continue;
                }
                for (j, t) in self.active.iter().enumerate() {
                    if track_taken[j] {
                        continue;
                    }
                    let d = dist(p, &t.last_center());
                    if d <= radius {
                        pairs.push((d, i, t.id, j));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, i, _, j) in pairs {
                if det_track[i].is_none() && !track_taken[j] {
                    det_track[i] = Some((j, stage));
                    track_taken[j] = true;
                }
            }
        }

        let mut pairs = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            if det_track[i].is_some() {
                continue;
            }
            for (j, t) in self.active.iter().enumerate() {
                if track_taken[j] {
                    continue;
                }
                let s = cosine(&d.embedding, &t.embedding);
                if s >= cfg.sim_min {
                    pairs.push((s, i, t.id, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, i, _, j) in pairs {
            if det_track[i].is_none() && !track_taken[j] {
                det_track[i] = Some((j, MatchStage::Embedding));
                track_taken[j] = true;
            }
        }

        let mut out = Vec::with_capacity(dets.len());
        for (i, d) in dets.iter().enumerate() {
            let entry = TrackedBox {
                frame,
                bbox: d.bbox,
                confidence: d.confidence,
            };
            match det_track[i] {
                Some((j, stage)) => {
                    let t = &mut self.active[j];
                    t.history.push(entry);
                    t.misses = 0;
                    if t.embedding.len() == d.embedding.len() {
                        for (e, n) in t.embedding.iter_mut().zip(&d.embedding) {
                            *e = cfg.ema * *e + (1.0 - cfg.ema) * n;
                        }
                    } else {
                        t.embedding = d.embedding.clone();
                    }
                    out.push(Assignment {
                        detection: i,
                        track_id: t.id,
                        stage,
                    });
                }
                None => out.push(Assignment {
                    detection: i,
                    track_id: self.spawn(entry, d.embedding.clone()),
                    stage: MatchStage::New,
                }),
            }
        }

        let mut kept = Vec::with_capacity(self.active.len());
        for (j, mut t) in std::mem::take(&mut self.active).into_iter().enumerate() {
            if j < track_taken.len() && !track_taken[j] {
                t.misses += 1;
                if t.misses > cfg.max_misses {
                    t.status = TrackStatus::Terminated;
                    self.terminated.push(t);
                    continue;
                }
            }
            kept.push(t);
        }
        self.active = kept;
        Ok(out)
    }

    fn spawn(&mut self, first: TrackedBox, embedding: Vec<f64>) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.active.push(Track {
            id,
            history: vec![first],
            embedding,
            misses: 0,
            status: TrackStatus::Active,
        });
        id
    }

    /// All tracks, ordered by id.
    pub fn into_tracks(self) -> Vec<Track> {
        let mut all: Vec<Track> = self.terminated.into_iter().chain(self.active).collect();
        all.sort_by_key(|t| t.id);
        all
    }
}

/// Folds [`TrackerState::step`] over frames `0, 1, ...`.
pub fn run(frames: &[(Vec<Detection>, OffsetField)], cfg: &TrackerConfig) -> Result<Vec<Track>> {
    let mut state = TrackerState::new();
    for (f, (dets, offsets)) in frames.iter().enumerate() {
        state.step(f, dets, offsets, cfg)?;
    }
    Ok(state.into_tracks())
}

/// Track-file line: `frame track_id cx cy cz w l h yaw conf`.
pub fn format_track_line(track_id: u32, b: &TrackedBox) -> String {
    let c = b.bbox.center;
    let s = b.bbox.size;
    format!(
        "{} {} {} {} {} {} {} {} {} {}",
        b.frame, track_id, c[0], c[1], c[2], s[0], s[1], s[2], b.bbox.yaw, b.confidence
    )
}

/// Every tracked box as track-file text, ordered by frame then track id.
pub fn format_tracks(tracks: &[Track]) -> String {
    let mut rows: Vec<(usize, u32, &TrackedBox)> = tracks
        .iter()
        .flat_map(|t| t.history.iter().map(move |h| (h.frame, t.id, h)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::new();
    for (_, id, b) in rows {
        let _ = writeln!(out, "{}", format_track_line(id, b));
    }
    out
}
