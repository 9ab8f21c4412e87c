//! Command-line interface: `modt synth|train|track|eval|gradcheck`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{ModtError, Result};
use crate::gradcheck::{check_model, GradCheckOptions, ModelCheckSetup};
use crate::metrics::{
    averaged_mot, evaluate, format_key_values, format_recall_csv, format_summary, gt_series, load_tracks, track_series,
};
use crate::pipeline::{format_detections, track_sequence};
use crate::scans::{load_ground_truth, load_scan_dir, read_sequence, synth_scene, window_triplets, write_sequence};
use crate::tracker::format_tracks;
use crate::train::{format_log_csv, train, IterationLog};

pub const THREADS_ENV: &str = "MODT_THREADS";
pub const LOSS_LOG_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(name = "modt", version, about = "Joint detection and tracking on LiDAR scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence: scans/*.bin, gt.txt and config.toml.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a sequence directory and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to the configured iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the tracker over a directory of scans.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scans: PathBuf,
        /// Track file: `frame track_id cx cy cz w l h yaw conf` per line.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-frame detections here.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Score a track file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory: summary.txt, metrics.txt and recall.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ModtError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, data).map_err(|e| ModtError::io(format!("writing {}", path.display()), e))
}

/// Applies `MODT_THREADS` to the global thread pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ModtError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool that is already initialized keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = synth_scene(&cfg.scene, cfg.seed)?;
    write_sequence(out, &seq.frames)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    println!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

fn previous_log(dir: &Path, before: usize) -> Option<String> {
    let text = fs::read_to_string(dir.join(LOSS_LOG_FILE)).ok()?;
    let mut lines = text.lines();
    lines.next()?;
    let kept: Vec<&str> = lines
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < before))
        .collect();
    Some(kept.iter().map(|l| format!("{l}\n")).collect())
}

pub fn cmd_train(cfg: Option<RunConfig>, data: &Path, out: &Path, resume: Option<&Path>) -> Result<Vec<IterationLog>> {
    let (mut ck, prior) = match resume {
        Some(dir) => {
            let mut ck = Checkpoint::load(dir)?;
            if let Some(cfg) = cfg {
                ck.params.check_shapes(&cfg.model())?;
                ck.config = cfg;
            }
            let prior = previous_log(dir, ck.adam.step).unwrap_or_default();
            (ck, prior)
        }
        None => (Checkpoint::initial(cfg.unwrap_or_default()), String::new()),
    };
    ck.config.validate()?;
    let frames = read_sequence(data)?;
    let windows = window_triplets(&frames)?;
    let model = ck.config.model();
    let train_cfg = ck.config.train.clone();
    let log = train(&mut ck.params, &mut ck.adam, &windows, &model, &train_cfg, |e| {
        eprintln!("iter {:>4}  lr {:.3e}  loss {:.6}", e.iteration, e.learning_rate, e.loss.total);
    })?;
    ck.save(out)?;
    let csv = format_log_csv(&log);
    let (header, body) = csv.split_once('\n').unwrap_or((&csv, ""));
    write_file(&out.join(LOSS_LOG_FILE), format!("{header}\n{prior}{body}"))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("trained {} iterations: loss {:.6} -> {:.6}", log.len(), first.loss.total, last.loss.total);
    }
    Ok(log)
}

pub fn cmd_track(checkpoint: &Path, scans: &Path, out: &Path, detections: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let clouds = load_scan_dir(scans)?;
    let run = track_sequence(&ck, &clouds)?;
    write_file(out, format_tracks(&run.tracks))?;
    if let Some(p) = detections {
        write_file(p, format_detections(&run.frames))?;
    }
    println!("{} frames, {} tracks -> {}", clouds.len(), run.tracks.len(), out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, tracks: &Path, gt: &Path, out: &Path) -> Result<String> {
    let gt_entries = load_ground_truth(gt)?;
    let records = load_tracks(tracks)?;
    let n = gt_entries
        .iter()
        .map(|e| e.0 + 1)
        .chain(records.iter().map(|r| r.frame + 1))
        .max()
        .unwrap_or(0);
    let g = gt_series(&gt_entries, n);
    let p = track_series(&records, n);
    let d = cfg.eval.dist_max;
    let mot = evaluate(&g, &p, d);
    let avg = averaged_mot(&g, &p, d);
    let summary = format_summary(&mot, &avg);
    fs::create_dir_all(out).map_err(|e| ModtError::io(format!("creating {}", out.display()), e))?;
    write_file(&out.join("summary.txt"), &summary)?;
    write_file(&out.join("metrics.txt"), format_key_values(&mot, &avg))?;
    write_file(&out.join("recall.csv"), format_recall_csv(&avg))?;
    print!("{summary}");
    Ok(summary)
}

pub fn cmd_gradcheck(cfg: &RunConfig, seeds: u64) -> Result<()> {
    cfg.validate()?;
    let model = cfg.model();
    let setup = ModelCheckSetup::default();
    let opts = GradCheckOptions::default();
    let mut failed = 0;
    for seed in cfg.seed..cfg.seed + seeds {
        let r = check_model(&model, &setup, seed, &opts)?;
        println!(
            "seed {seed}: {} checked, {} failed, max rel. error {:.3e}{}",
            r.checked,
            r.failures,
            r.max_error,
            r.worst.as_deref().map(|w| format!(" ({w})")).unwrap_or_default()
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(ModtError::Runtime(format!("gradient check failed for {failed} of {seeds} seeds")));
    }
    println!("gradient check passed (tolerance {:e})", opts.tolerance);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&common.load()?, &out),
        Command::Train { common, data, out, resume } => {
            let cfg = if resume.is_some() && common.config.is_none() && common.seed.is_none() {
                None
            } else {
                Some(common.load()?)
            };
            cmd_train(cfg, &data, &out, resume.as_deref()).map(|_| ())
        }
        Command::Track { checkpoint, scans, out, detections } => cmd_track(&checkpoint, &scans, &out, detections.as_deref()),
        Command::Eval { common, tracks, gt, out } => cmd_eval(&common.load()?, &tracks, &gt, &out).map(|_| ()),
        Command::Gradcheck { common, seeds } => cmd_gradcheck(&common.load()?, seeds),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
