//! CLEAR-MOT and recall-averaged tracking metrics with center-distance
//! matching.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ModtError, Result};
use crate::geometry::{dist, Box3D, Point3};
use crate::scans::GroundTruthObject;
use crate::tracker::Track;

/// Number of recall points in the averaged metrics.
pub const RECALL_STEPS: usize = 40;

/// One line of a track file. Lines without the trailing confidence (the
/// ground-truth layout) get confidence 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub track_id: u32,
    pub bbox: Box3D,
    pub confidence: f64,
}

pub fn parse_tracks(text: &str, path: &Path) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ModtError::TextFormat {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 && fields.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|_| err(format!("bad frame index {:?}", fields[0])))?;
        let track_id: u32 = fields[1].parse().map_err(|_| err(format!("bad track id {:?}", fields[1])))?;
        let mut v = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (k, f) in fields[2..].iter().enumerate() {
            v[k] = f.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(format!("bad number {f:?}")))?;
        }
        if v[3] <= 0.0 || v[4] <= 0.0 || v[5] <= 0.0 {
            return Err(err("box sizes must be positive".into()));
        }
        out.push(TrackRecord {
            frame,
            track_id,
            bbox: Box3D {
                center: [v[0], v[1], v[2]],
                size: [v[3], v[4], v[5]],
                yaw: v[6],
            },
            confidence: v[7],
        });
    }
    Ok(out)
}

/// Flattens tracker output into records, ordered by frame then id.
pub fn track_records(tracks: &[Track]) -> Vec<TrackRecord> {
    let mut out: Vec<TrackRecord> = tracks
        .iter()
        .flat_map(|t| {
            t.history.iter().map(move |h| TrackRecord {
                frame: h.frame,
                track_id: t.id,
                bbox: h.bbox,
                confidence: h.confidence,
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.track_id));
    out
}

pub fn load_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| ModtError::io(format!("reading {}", path.display()), e))?;
    parse_tracks(&text, path)
}

/// Ground-truth or predicted object in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labeled {
    pub id: u32,
    pub center: Point3,
    pub confidence: f64,
}

/// Objects per frame, indexed by frame number.
pub type FrameSeries = Vec<Vec<Labeled>>;

pub fn gt_series(entries: &[(usize, GroundTruthObject)], num_frames: usize) -> FrameSeries {
    let n = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0).max(num_frames);
    let mut out = vec![Vec::new(); n];
    for (f, o) in entries {
        out[*f].push(Labeled {
            id: o.track_id,
            center: o.bbox.center,
            confidence: 1.0,
        });
    }
    out
}

pub fn track_series(records: &[TrackRecord], num_frames: usize) -> FrameSeries {
    let n = records.iter().map(|r| r.frame + 1).max().unwrap_or(0).max(num_frames);
    let mut out = vec![Vec::new(); n];
    for r in records {
        out[r.frame].push(Labeled {
            id: r.track_id,
            center: r.bbox.center,
            confidence: r.confidence,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub gt_id: u32,
    pub pred_id: u32,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatching {
    pub matches: Vec<Match>,
    /// Unmatched ground truth (false negatives).
    pub missed: Vec<u32>,
    /// Unmatched predictions (false positives).
    pub false_positives: Vec<u32>,
}

/// Injective matching within `dist_max`. Pairs from `previous` (gt id to
/// pred id) are kept first when still in range; the rest are matched
/// greedily by ascending distance, ties by gt then prediction order.
pub fn match_frame(gt: &[Labeled], pred: &[Labeled], dist_max: f64, previous: &HashMap<u32, u32>) -> FrameMatching {
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matches = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        let Some(&pid) = previous.get(&g.id) else { continue };
        if let Some(j) = (0..pred.len()).find(|&j| !pred_used[j] && pred[j].id == pid) {
            let d = dist(&g.center, &pred[j].center);
            if d <= dist_max {
                gt_used[i] = true;
                pred_used[j] = true;
                matches.push((i, j, d));
            }
        }
    }
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        if gt_used[i] {
            continue;
        }
        for (j, p) in pred.iter().enumerate() {
            if pred_used[j] {
                continue;
            }
            let d = dist(&g.center, &p.center);
            if d <= dist_max {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (d, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matches.push((i, j, d));
        }
    }
    matches.sort_by_key(|m| m.0);
    FrameMatching {
        matches: matches
            .into_iter()
            .map(|(i, j, d)| Match {
                gt_id: gt[i].id,
                pred_id: pred[j].id,
                distance: d,
            })
            .collect(),
        missed: (0..gt.len()).filter(|&i| !gt_used[i]).map(|i| gt[i].id).collect(),
        false_positives: (0..pred.len()).filter(|&j| !pred_used[j]).map(|j| pred[j].id).collect(),
    }
}

/// Matches every frame, carrying the previous frame's pairs forward.
pub fn match_sequence(gt: &FrameSeries, pred: &FrameSeries, dist_max: f64) -> Vec<FrameMatching> {
    let n = gt.len().max(pred.len());
    let empty = Vec::new();
    let mut previous: HashMap<u32, u32> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for f in 0..n {
        let m = match_frame(gt.get(f).unwrap_or(&empty), pred.get(f).unwrap_or(&empty), dist_max, &previous);
        previous = m.matches.iter().map(|x| (x.gt_id, x.pred_id)).collect();
        out.push(m);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotReport {
    /// `None` when there is no ground truth.
    pub mota: Option<f64>,
    /// Percent similarity `100 * mean(1 - d / dist_max)`; `None` without matches.
    pub motp: Option<f64>,
    pub ids: usize,
    pub fp: usize,
    pub fn_: usize,
    pub frag: usize,
    pub matches: usize,
    /// Ground-truth boxes over all frames.
    pub gt_objects: usize,
    pub gt_trajectories: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
}

impl MotReport {
    pub fn mt_fraction(&self) -> f64 {
        frac(self.mostly_tracked, self.gt_trajectories)
    }

    pub fn ml_fraction(&self) -> f64 {
        frac(self.mostly_lost, self.gt_trajectories)
    }
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn clear_mot(frames: &[FrameMatching], dist_max: f64) -> MotReport {
    let mut r = MotReport::default();
    let mut last_pred: HashMap<u32, u32> = HashMap::new();
    // Per gt id: (frames present, frames tracked, was tracked at its last appearance).
    let mut life: BTreeMap<u32, (usize, usize, Option<bool>)> = BTreeMap::new();
    let mut sim = 0.0;
    for fm in frames {
        r.fp += fm.false_positives.len();
        r.fn_ += fm.missed.len();
        r.matches += fm.matches.len();
        for m in &fm.matches {
            sim += 1.0 - m.distance / dist_max;
            if let Some(prev) = last_pred.insert(m.gt_id, m.pred_id) {
                if prev != m.pred_id {
                    r.ids += 1;
                }
            }
            let e = life.entry(m.gt_id).or_default();
            e.0 += 1;
            e.1 += 1;
            e.2 = Some(true);
        }
        for id in &fm.missed {
            let e = life.entry(*id).or_default();
            e.0 += 1;
            if e.2 == Some(true) {
                r.frag += 1;
            }
            e.2 = Some(false);
        }
    }
    r.gt_objects = r.matches + r.fn_;
    r.gt_trajectories = life.len();
    for (present, tracked, _) in life.values() {
        let ratio = *tracked as f64 / *present as f64;
        if ratio >= 0.8 {
            r.mostly_tracked += 1;
        } else if ratio < 0.2 {
            r.mostly_lost += 1;
        }
    }
    if r.gt_objects > 0 {
        r.mota = Some(1.0 - (r.fn_ + r.fp + r.ids) as f64 / r.gt_objects as f64);
    }
    if r.matches > 0 {
        r.motp = Some(100.0 * sim / r.matches as f64);
    }
    r
}

pub fn evaluate(gt: &FrameSeries, pred: &FrameSeries, dist_max: f64) -> MotReport {
    clear_mot(&match_sequence(gt, pred, dist_max), dist_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallPoint {
    pub recall: f64,
    /// Confidence threshold that reached this recall; `None` if unreachable.
    pub threshold: Option<f64>,
    pub mota: f64,
    pub smota: f64,
    pub motp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragedReport {
    pub amota: f64,
    pub samota: f64,
    pub amotp: f64,
    pub points: Vec<RecallPoint>,
}

pub fn recall_grid() -> Vec<f64> {
    (1..=RECALL_STEPS).map(|i| i as f64 / RECALL_STEPS as f64).collect()
}

pub fn filter_confidence(pred: &FrameSeries, threshold: f64) -> FrameSeries {
    pred.iter()
        .map(|f| f.iter().filter(|p| p.confidence >= threshold).copied().collect())
        .collect()
}

/// Matches needed to reach `recall`.
pub fn required_matches(recall: f64, gt_objects: usize) -> usize {
    (recall * gt_objects as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Recall-rescaled MOTA clamped into `[0, 1]`.
pub fn scaled_mota(report: &MotReport, recall: f64) -> f64 {
    let gt = report.gt_objects as f64;
    let errors = (report.ids + report.fp + report.fn_) as f64;
    (1.0 - (errors - (1.0 - recall) * gt) / (recall * gt)).clamp(0.0, 1.0)
}

/// Sweeps confidence thresholds over the scores of predictions matched at
/// the lowest threshold, from high to low. Each recall point uses the first
/// threshold whose matched count reaches it; unreachable points score 0.
pub fn averaged_mot(gt: &FrameSeries, pred: &FrameSeries, dist_max: f64) -> AveragedReport {
    let full = match_sequence(gt, pred, dist_max);
    let gt_objects: usize = gt.iter().map(Vec::len).sum();
    let mut scores: Vec<f64> = Vec::new();
    let n = gt.len().max(pred.len());
    for (f, fm) in full.iter().enumerate().take(n) {
        for m in &fm.matches {
            if let Some(p) = pred.get(f).and_then(|ps| ps.iter().find(|p| p.id == m.pred_id)) {
                scores.push(p.confidence);
            }
        }
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut cache: Vec<Option<MotReport>> = vec![None; scores.len()];
    let mut points = Vec::with_capacity(RECALL_STEPS);
    for recall in recall_grid() {
        let need = required_matches(recall, gt_objects);
        let mut found = None;
        if gt_objects > 0 {
            for (k, &tau) in scores.iter().enumerate() {
                let rep = cache[k].get_or_insert_with(|| evaluate(gt, &filter_confidence(pred, tau), dist_max));
                if rep.matches >= need {
                    found = Some((tau, rep.clone()));
                    break;
                }
            }
        }
        points.push(match found {
            Some((tau, rep)) => RecallPoint {
                recall,
                threshold: Some(tau),
                mota: rep.mota.unwrap_or(0.0),
                smota: scaled_mota(&rep, recall),
                motp: rep.motp.unwrap_or(0.0),
            },
            None => RecallPoint {
                recall,
                threshold: None,
                mota: 0.0,
                smota: 0.0,
                motp: 0.0,
            },
        });
    }
    let mean = |f: fn(&RecallPoint) -> f64| points.iter().map(f).sum::<f64>() / RECALL_STEPS as f64;
    AveragedReport {
        amota: mean(|p| p.mota),
        samota: mean(|p| p.smota),
        amotp: mean(|p| p.motp),
        points,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

pub fn format_summary(mot: &MotReport, avg: &AveragedReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "MOTA     {}", opt(mot.mota));
    let _ = writeln!(s, "MOTP     {}", opt(mot.motp));
    let _ = writeln!(s, "IDS      {}", mot.ids);
    let _ = writeln!(s, "FRAG     {}", mot.frag);
    let _ = writeln!(s, "FP       {}", mot.fp);
    let _ = writeln!(s, "FN       {}", mot.fn_);
    let _ = writeln!(s, "MT       {:.4} ({}/{})", mot.mt_fraction(), mot.mostly_tracked, mot.gt_trajectories);
    let _ = writeln!(s, "ML       {:.4} ({}/{})", mot.ml_fraction(), mot.mostly_lost, mot.gt_trajectories);
    let _ = writeln!(s, "GT       {}", mot.gt_objects);
    let _ = writeln!(s, "AMOTA    {:.6}", avg.amota);
    let _ = writeln!(s, "sAMOTA   {:.6}", avg.samota);
    let _ = writeln!(s, "AMOTP    {:.6}", avg.amotp);
    s
}

pub fn format_key_values(mot: &MotReport, avg: &AveragedReport) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("mota", opt(mot.mota)),
        ("motp", opt(mot.motp)),
        ("ids", mot.ids.to_string()),
        ("frag", mot.frag.to_string()),
        ("fp", mot.fp.to_string()),
        ("fn", mot.fn_.to_string()),
        ("mt", format!("{:.6}", mot.mt_fraction())),
        ("ml", format!("{:.6}", mot.ml_fraction())),
        ("gt_objects", mot.gt_objects.to_string()),
        ("gt_trajectories", mot.gt_trajectories.to_string()),
        ("amota", format!("{:.6}", avg.amota)),
        ("samota", format!("{:.6}", avg.samota)),
        ("amotp", format!("{:.6}", avg.amotp)),
    ] {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

pub fn format_recall_csv(avg: &AveragedReport) -> String {
    let mut s = String::from("recall,threshold,mota,smota,motp\n");
    for p in &avg.points {
        let _ = writeln!(
            s,
            "{:.3},{},{:.6},{:.6},{:.6}",
            p.recall,
            p.threshold.map_or_else(|| "nan".into(), |t| t.to_string()),
            p.mota,
            p.smota,
            p.motp
        );
    }
    s
}
