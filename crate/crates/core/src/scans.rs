//! Point-cloud scans: binary loading/saving, ground-truth sidecars, the
//! synthetic scene generator used as a test oracle, and three-frame windows.
//!
//! Scan files hold little-endian records of four `f32` values
//! `(x, y, z, intensity)`. Intensity is parsed and dropped.
//!
//! Ground-truth sidecars are text, one object per line:
//! `frame track_id cx cy cz w l h yaw`.
//!
//! Synthetic scenes live in a fixed world frame; real scans are assumed to
//! be ego-motion compensated upstream if that matters for the data at hand.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ModtError, Result};
use crate::geometry::{wrap_angle, Box3D, Point3};

const RECORD_BYTES: usize = 16;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Jitter is truncated at this many standard deviations, so labelled points
/// always fall inside their box grown by `JITTER_CLIP * sigma`.
pub const JITTER_CLIP: f64 = 3.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub frame: usize,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(frame: usize, points: Vec<Point3>) -> Self {
        Self { frame, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub track_id: u32,
    pub bbox: Box3D,
}

/// One frame of a sequence: the scan, its objects, and per-point object
/// membership (`labels[i]` is the track id point `i` was sampled from).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub objects: Vec<GroundTruthObject>,
    pub labels: Vec<Option<u32>>,
}

impl Frame {
    /// Frame built from a loaded scan; membership is recovered by box containment.
    pub fn from_scan(cloud: PointCloud, objects: Vec<GroundTruthObject>) -> Self {
        let labels = cloud
            .points
            .iter()
            .map(|p| objects.iter().find(|o| o.bbox.contains(p, 0.0)).map(|o| o.track_id))
            .collect();
        Self {
            cloud,
            objects,
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrajectory {
    pub track_id: u32,
    pub initial_center: Point3,
    pub velocity: Point3,
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub trajectories: Vec<ObjectTrajectory>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_frames: usize,
    pub points_per_object: usize,
    /// Standard deviation of the per-point Gaussian jitter (meters).
    pub noise_sigma: f64,
    pub clutter_points: usize,
    /// Speed range in meters per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Largest per-frame velocity change (meters per frame per frame).
    pub perturbation: f64,
    /// Objects start inside `[-extent, extent]^2`.
    pub extent: f64,
    /// Minimum clearance between initial box footprints (meters).
    pub min_gap: f64,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 3,
            num_frames: 8,
            points_per_object: 48,
            noise_sigma: 0.02,
            clutter_points: 16,
            speed_min: 0.3,
            speed_max: 0.8,
            perturbation: 0.02,
            extent: 8.0,
            min_gap: 2.0,
            size_min: [0.6, 0.6, 1.5],
            size_max: [0.9, 1.0, 1.9],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModtError::Config(format!("scene: {m}")));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad("need 0 <= speed_min <= speed_max");
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return bad("perturbation must be finite and >= 0");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if !(self.min_gap >= 0.0 && self.min_gap.is_finite()) {
            return bad("min_gap must be >= 0");
        }
        for i in 0..3 {
            if !(self.size_min[i] > 0.0 && self.size_min[i] <= self.size_max[i] && self.size_max[i].is_finite()) {
                return bad("need 0 < size_min <= size_max per axis");
            }
        }
        Ok(())
    }
}

/// Reads one binary scan.
pub fn load_scan(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| ModtError::io(format!("reading {}", path.display()), e))?;
    parse_scan(&bytes, path)
}

fn parse_scan(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(ModtError::ScanFormat {
            path: path.to_path_buf(),
            offset,
            message: format!("truncated record: {} trailing bytes", bytes.len() - offset),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut vals = [0f32; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ModtError::ScanFormat {
                path: path.to_path_buf(),
                offset: i * RECORD_BYTES,
                message: format!("non-finite value in record {i}"),
            });
        }
        points.push([vals[0] as f64, vals[1] as f64, vals[2] as f64]);
    }
    Ok(PointCloud::new(0, points))
}

/// Writes a scan with zero intensity.
pub fn save_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| ModtError::io(format!("writing {}", path.display()), e))
}

/// Scan files (`*.bin`) of a directory in lexicographic order. A `scans/`
/// subdirectory is used when present.
pub fn list_scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join("scans").is_dir() {
        dir.join("scans")
    } else {
        dir.to_path_buf()
    };
    let entries = fs::read_dir(&dir).map_err(|e| ModtError::io(format!("listing {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ModtError::io(format!("listing {}", dir.display()), e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "bin") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every scan of a directory, numbering frames by file order.
pub fn load_scan_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    list_scan_files(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cloud = load_scan(p)?;
            cloud.frame = i;
            Ok(cloud)
        })
        .collect()
}

/// Parses a ground-truth sidecar into `(frame, object)` pairs.
pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<(usize, GroundTruthObject)>> {
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
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|_| err(format!("bad frame '{}'", fields[0])))?;
        let track_id: u32 = fields[1].parse().map_err(|_| err(format!("bad track id '{}'", fields[1])))?;
        let mut vals = [0.0; 7];
        for (k, v) in vals.iter_mut().enumerate() {
            let s = fields[2 + k];
            *v = s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number '{s}'")))?;
        }
        if vals[3] <= 0.0 || vals[4] <= 0.0 || vals[5] <= 0.0 {
            return Err(err("box sizes must be positive".into()));
        }
        out.push((
            frame,
            GroundTruthObject {
                track_id,
                bbox: Box3D {
                    center: [vals[0], vals[1], vals[2]],
                    size: [vals[3], vals[4], vals[5]],
                    yaw: vals[6],
                },
            },
        ));
    }
    Ok(out)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<(usize, GroundTruthObject)>> {
    let text = fs::read_to_string(path).map_err(|e| ModtError::io(format!("reading {}", path.display()), e))?;
    parse_ground_truth(&text, path)
}

/// Groups `(frame, object)` pairs into `num_frames` per-frame lists.
pub fn group_by_frame(entries: Vec<(usize, GroundTruthObject)>, num_frames: usize) -> Vec<Vec<GroundTruthObject>> {
    let frames = entries.iter().map(|(f, _)| f + 1).max().unwrap_or(0).max(num_frames);
    let mut out = vec![Vec::new(); frames];
    for (f, o) in entries {
        out[f].push(o);
    }
    out
}

pub fn format_ground_truth_line(frame: usize, o: &GroundTruthObject) -> String {
    let b = &o.bbox;
    format!(
        "{} {} {} {} {} {} {} {} {}",
        frame, o.track_id, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
    )
}

/// Writes `scans/NNNNNN.bin` for every frame and a `gt.txt` sidecar.
pub fn write_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    let scans = dir.join("scans");
    fs::create_dir_all(&scans).map_err(|e| ModtError::io(format!("creating {}", scans.display()), e))?;
    let gt_path = dir.join("gt.txt");
    let mut gt = fs::File::create(&gt_path).map_err(|e| ModtError::io(format!("creating {}", gt_path.display()), e))?;
    for (i, frame) in frames.iter().enumerate() {
        save_scan(&scans.join(format!("{i:06}.bin")), &frame.cloud)?;
        for o in &frame.objects {
            writeln!(gt, "{}", format_ground_truth_line(i, o))
                .map_err(|e| ModtError::io(format!("writing {}", gt_path.display()), e))?;
        }
    }
    Ok(())
}

/// Loads a directory written by [`write_sequence`] (scans plus `gt.txt`).
pub fn read_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let clouds = load_scan_dir(dir)?;
    let gt_path = dir.join("gt.txt");
    let gt = if gt_path.exists() {
        group_by_frame(load_ground_truth(&gt_path)?, clouds.len())
    } else {
        vec![Vec::new(); clouds.len()]
    };
    Ok(clouds
        .into_iter()
        .zip(gt)
        .map(|(cloud, objects)| Frame::from_scan(cloud, objects))
        .collect())
}

fn sample_ball(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    if radius == 0.0 {
        return [0.0, 0.0];
    }
    let ang = rng.random_range(0.0..2.0 * PI);
    let r = radius * rng.random::<f64>().sqrt();
    [r * ang.cos(), r * ang.sin()]
}

/// Generates a deterministic synthetic sequence.
///
/// Objects move on constant-velocity trajectories with a bounded random
/// velocity perturbation; each emits points uniformly inside its box plus
/// truncated Gaussian jitter. Frame `t` centers equal
/// `initial + t * velocity + drift(t)`, where `drift` is exactly zero
/// without perturbation.
pub fn synth_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut trajectories: Vec<ObjectTrajectory> = Vec::with_capacity(cfg.num_objects);
    let mut yaws = Vec::with_capacity(cfg.num_objects);
    let mut attempts = 0;
    while trajectories.len() < cfg.num_objects {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(ModtError::Runtime(format!(
                "could not place {} non-overlapping objects after {MAX_PLACEMENT_ATTEMPTS} attempts",
                cfg.num_objects
            )));
        }
        let mut size = [0.0; 3];
        for (i, s) in size.iter_mut().enumerate() {
            *s = if cfg.size_min[i] < cfg.size_max[i] {
                rng.random_range(cfg.size_min[i]..=cfg.size_max[i])
            } else {
                cfg.size_min[i]
            };
        }
        let x = rng.random_range(-cfg.extent..=cfg.extent);
        let y = rng.random_range(-cfg.extent..=cfg.extent);
        let heading = rng.random_range(-PI..PI);
        let speed = if cfg.speed_min < cfg.speed_max {
            rng.random_range(cfg.speed_min..=cfg.speed_max)
        } else {
            cfg.speed_min
        };
        let radius = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let clear = trajectories.iter().all(|t| {
            let r2 = 0.5 * (t.size[0] * t.size[0] + t.size[1] * t.size[1]).sqrt();
            let d = ((t.initial_center[0] - x).powi(2) + (t.initial_center[1] - y).powi(2)).sqrt();
            d >= radius + r2 + cfg.min_gap
        });
        if !clear {
            continue;
        }
        trajectories.push(ObjectTrajectory {
            track_id: trajectories.len() as u32 + 1,
            initial_center: [x, y, size[2] / 2.0],
            velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
            size,
        });
        yaws.push(heading);
    }

    let jitter = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| ModtError::Config(e.to_string()))?)
    } else {
        None
    };
    let clip = JITTER_CLIP * cfg.noise_sigma;

    // Per-object velocity deviation and accumulated drift.
    let mut vel_dev = vec![[0.0f64; 2]; trajectories.len()];
    let mut drift = vec![[0.0f64; 2]; trajectories.len()];
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        if t > 0 {
            for (k, traj) in trajectories.iter().enumerate() {
                let dv = sample_ball(&mut rng, cfg.perturbation);
                let mut vx = traj.velocity[0] + vel_dev[k][0] + dv[0];
                let mut vy = traj.velocity[1] + vel_dev[k][1] + dv[1];
                let speed = (vx * vx + vy * vy).sqrt();
                if speed > cfg.speed_max && speed > 0.0 {
                    vx *= cfg.speed_max / speed;
                    vy *= cfg.speed_max / speed;
                }
                vel_dev[k] = [vx - traj.velocity[0], vy - traj.velocity[1]];
                drift[k][0] += vel_dev[k][0];
                drift[k][1] += vel_dev[k][1];
            }
        }
        let mut objects = Vec::with_capacity(trajectories.len());
        let mut points: Vec<(Point3, Option<u32>)> = Vec::new();
        for (k, traj) in trajectories.iter().enumerate() {
            let tf = t as f64;
            let center = [
                traj.initial_center[0] + tf * traj.velocity[0] + drift[k][0],
                traj.initial_center[1] + tf * traj.velocity[1] + drift[k][1],
                traj.initial_center[2],
            ];
            let vx = traj.velocity[0] + vel_dev[k][0];
            let vy = traj.velocity[1] + vel_dev[k][1];
            let yaw = if (vx * vx + vy * vy).sqrt() > 1e-9 {
                wrap_angle(vy.atan2(vx))
            } else {
                wrap_angle(yaws[k])
            };
            let bbox = Box3D {
                center,
                size: traj.size,
                yaw,
            };
            for _ in 0..cfg.points_per_object {
                let [w, l, h] = traj.size;
                let mut q = [
                    rng.random_range(-l / 2.0..=l / 2.0),
                    rng.random_range(-w / 2.0..=w / 2.0),
                    rng.random_range(-h / 2.0..=h / 2.0),
                ];
                if let Some(n) = &jitter {
                    for v in &mut q {
                        *v += n.sample(&mut rng).clamp(-clip, clip);
                    }
                }
                points.push((bbox.from_local(&q), Some(traj.track_id)));
            }
            objects.push(GroundTruthObject {
                track_id: traj.track_id,
                bbox,
            });
        }
        let zmax = cfg.size_max[2];
        let span = cfg.extent + 2.0;
        for _ in 0..cfg.clutter_points {
            let p = [
                rng.random_range(-span..=span),
                rng.random_range(-span..=span),
                rng.random_range(0.0..=zmax),
            ];
            points.push((p, None));
        }
        // Fisher-Yates so that no object systematically owns index 0.
        for i in (1..points.len()).rev() {
            let j = rng.random_range(0..=i);
            points.swap(i, j);
        }
        let (pts, labels): (Vec<Point3>, Vec<Option<u32>>) = points.into_iter().unzip();
        frames.push(Frame {
            cloud: PointCloud::new(t, pts),
            objects,
            labels,
        });
    }
    Ok(SyntheticSequence {
        frames,
        trajectories,
        seed,
    })
}

/// Scans `t`, `t-1`, `t-2` of one network pass.
#[derive(Clone, Copy, Debug)]
pub struct FrameTriplet<'a> {
    pub current: &'a Frame,
    pub previous: &'a Frame,
    pub before: &'a Frame,
}

/// All `F - 2` overlapping triplets in temporal order; triplet `i` holds
/// frames `(i + 2, i + 1, i)`.
pub fn window_triplets(frames: &[Frame]) -> Result<Vec<FrameTriplet<'_>>> {
    if frames.len() < 3 {
        return Err(ModtError::invalid(format!(
            "need at least 3 frames to form a triplet, got {}",
            frames.len()
        )));
    }
    Ok(frames
        .windows(3)
        .map(|w| FrameTriplet {
            current: &w[2],
            previous: &w[1],
            before: &w[0],
        })
        .collect())
}
