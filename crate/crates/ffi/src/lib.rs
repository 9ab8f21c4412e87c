//! C interface to the tracker and the evaluator.
//!
//! Handles are opaque pointers released with their `_free` function. Every
//! call returns a [`ModtStatus`]; on failure [`modt_last_error`] describes
//! the problem until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use modt::checkpoint::Checkpoint;
use modt::config::RunConfig;
use modt::metrics::{averaged_mot, evaluate, gt_series, load_tracks, track_series};
use modt::pipeline::Pipeline;
use modt::scans::{load_ground_truth, PointCloud};
use modt::ModtError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    /// Malformed file or config; the CLI maps this to exit code 2.
    FormatError = 3,
    IoError = 4,
    RuntimeError = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// One tracked detection of the most recent frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModtTrackedBox {
    pub track_id: u32,
    pub center: [f64; 3],
    /// Width, length, height in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub confidence: f64,
}

/// Tracking metrics. Undefined ratios (no ground truth, no matches) are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModtMetrics {
    pub mota: f64,
    pub motp: f64,
    pub amota: f64,
    pub samota: f64,
    pub amotp: f64,
    pub id_switches: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub fragmentations: u64,
    pub matches: u64,
    pub gt_objects: u64,
    pub gt_trajectories: u64,
    pub mostly_tracked: u64,
    pub mostly_lost: u64,
}

/// Streaming tracker state.
pub struct ModtTracker {
    pipeline: Pipeline,
    last: Vec<ModtTrackedBox>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (ModtStatus, String);

fn from_error(e: ModtError) -> Failure {
    let status = match &e {
        ModtError::InvalidInput(_) => ModtStatus::InvalidInput,
        ModtError::ScanFormat { .. } | ModtError::TextFormat { .. } | ModtError::Config(_) => ModtStatus::FormatError,
        ModtError::Io { .. } => ModtStatus::IoError,
        ModtError::Runtime(_) => ModtStatus::RuntimeError,
    };
    (status, e.to_string())
}

fn null(name: &str) -> Failure {
    (ModtStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ModtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ModtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            ModtStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ModtStatus::InvalidInput, format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn modt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn modt_version() -> *const c_char {
    static VERSION: &CStr = c"0.1.0";
    VERSION.as_ptr()
}

fn boxed(pipeline: Pipeline, out: *mut *mut ModtTracker) {
    let t = Box::new(ModtTracker { pipeline, last: Vec::new() });
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(t) };
}

/// Opens a tracker from a checkpoint directory.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated string and `out` a valid
/// pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn modt_tracker_open(checkpoint_dir: *const c_char, out: *mut *mut ModtTracker) -> ModtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(checkpoint_dir, "checkpoint_dir")?;
        let ck = Checkpoint::load(dir).map_err(from_error)?;
        boxed(Pipeline::from_checkpoint(&ck).map_err(from_error)?, out);
        Ok(())
    })
}

/// Creates an untrained tracker initialized from a TOML run configuration
/// (null for defaults).
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn modt_tracker_from_config(config_toml: *const c_char, out: *mut *mut ModtTracker) -> ModtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| (ModtStatus::InvalidInput, "config is not UTF-8".to_string()))?;
            RunConfig::from_toml(text).map_err(from_error)?
        };
        boxed(Pipeline::from_checkpoint(&Checkpoint::initial(cfg)).map_err(from_error)?, out);
        Ok(())
    })
}

/// Feeds one scan of `n_points` xyz triples (`3 * n_points` doubles).
/// Frame numbers must increase. `n_boxes` (optional) receives the number of
/// tracked boxes now available from [`modt_tracker_outputs`].
///
/// # Safety
/// `tracker` must come from an open call; `points` must hold
/// `3 * n_points` doubles (it may be null when `n_points` is 0).
#[no_mangle]
pub unsafe extern "C" fn modt_tracker_process_frame(
    tracker: *mut ModtTracker,
    frame: u64,
    points: *const f64,
    n_points: usize,
    n_boxes: *mut usize,
) -> ModtStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if points.is_null() && n_points > 0 {
            return Err(null("points"));
        }
        let frame = usize::try_from(frame).map_err(|_| (ModtStatus::InvalidInput, "frame out of range".to_string()))?;
        let raw: &[f64] = if n_points == 0 { &[] } else { std::slice::from_raw_parts(points, 3 * n_points) };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err((ModtStatus::InvalidInput, "non-finite point coordinate".into()));
        }
        let cloud = PointCloud::new(frame, raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        let out = t.pipeline.process(&cloud).map_err(from_error)?;
        t.last = out
            .assignments
            .iter()
            .map(|a| {
                let d = &out.detections[a.detection];
                ModtTrackedBox {
                    track_id: a.track_id,
                    center: d.bbox.center,
                    size: d.bbox.size,
                    yaw: d.bbox.yaw,
                    confidence: d.confidence,
                }
            })
            .collect();
        if let Some(n) = n_boxes.as_mut() {
            *n = t.last.len();
        }
        Ok(())
    })
}

/// Copies up to `capacity` boxes of the last processed frame into `buf` and
/// stores the total count in `count`. Pass a null `buf` to query the count.
///
/// # Safety
/// `buf` must be null or hold `capacity` elements; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn modt_tracker_outputs(
    tracker: *const ModtTracker,
    buf: *mut ModtTrackedBox,
    capacity: usize,
    count: *mut usize,
) -> ModtStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        *count = t.last.len();
        if !buf.is_null() {
            let n = capacity.min(t.last.len());
            ptr::copy_nonoverlapping(t.last.as_ptr(), buf, n);
        }
        Ok(())
    })
}

/// Releases a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must be null or come from an open call, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn modt_tracker_free(tracker: *mut ModtTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Scores a track file against a ground-truth file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn modt_eval_files(
    tracks_path: *const c_char,
    gt_path: *const c_char,
    dist_max: f64,
    out: *mut ModtMetrics,
) -> ModtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let tracks = path_arg(tracks_path, "tracks_path")?;
        let gt = path_arg(gt_path, "gt_path")?;
        if !(dist_max > 0.0 && dist_max.is_finite()) {
            return Err((ModtStatus::InvalidInput, "dist_max must be positive".into()));
        }
        let gt_entries = load_ground_truth(gt).map_err(from_error)?;
        let records = load_tracks(tracks).map_err(from_error)?;
        let n = gt_entries
            .iter()
            .map(|e| e.0 + 1)
            .chain(records.iter().map(|r| r.frame + 1))
            .max()
            .unwrap_or(0);
        let g = gt_series(&gt_entries, n);
        let p = track_series(&records, n);
        let mot = evaluate(&g, &p, dist_max);
        let avg = averaged_mot(&g, &p, dist_max);
        *out = ModtMetrics {
            mota: mot.mota.unwrap_or(f64::NAN),
            motp: mot.motp.unwrap_or(f64::NAN),
            amota: avg.amota,
            samota: avg.samota,
            amotp: avg.amotp,
            id_switches: mot.ids as u64,
            false_positives: mot.fp as u64,
            false_negatives: mot.fn_ as u64,
            fragmentations: mot.frag as u64,
            matches: mot.matches as u64,
            gt_objects: mot.gt_objects as u64,
            gt_trajectories: mot.gt_trajectories as u64,
            mostly_tracked: mot.mostly_tracked as u64,
            mostly_lost: mot.mostly_lost as u64,
        };
        Ok(())
    })
}
