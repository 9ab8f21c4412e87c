use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn modt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modt")).args(args).output().expect("spawn modt")
}

fn ok(args: &[&str]) -> String {
    let out = modt(args);
    assert!(out.status.success(), "modt {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "seed = 3\n[scene]\nnum_frames = 5\n[encoder]\ntokens = 16\n[train]\niterations = 4\n";

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("gt.txt")).unwrap(), fs::read(b.join("gt.txt")).unwrap());
    let scans: Vec<_> = fs::read_dir(a.join("scans")).unwrap().collect();
    assert_eq!(scans.len(), 5);
    for e in scans {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(a.join("scans").join(&name)).unwrap(), fs::read(b.join("scans").join(&name)).unwrap());
    }
    ok(&["synth", "--config", s(&cfg), "--seed", "4", "--out", s(&b)]);
    assert_ne!(fs::read(a.join("gt.txt")).unwrap(), fs::read(b.join("gt.txt")).unwrap());
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data)]);
    let gt = data.join("gt.txt");
    let report = dir.path().join("report");
    let summary = ok(&["eval", "--tracks", s(&gt), "--gt", s(&gt), "--out", s(&report)]);
    assert!(summary.contains("MOTA"), "{summary}");
    let kv = fs::read_to_string(report.join("metrics.txt")).unwrap();
    assert!(kv.lines().any(|l| l == "mota=1.000000"), "{kv}");
    assert!(kv.lines().any(|l| l == "ids=0"), "{kv}");
    let recall = fs::read_to_string(report.join("recall.csv")).unwrap();
    assert_eq!(recall.lines().count(), 41);
}

#[test]
fn malformed_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, "0 1 0 0 0 2 4 1.5 0\n1 1 0 0 zero 2 4 1.5 0\n").unwrap();
    let out = modt(&["eval", "--tracks", s(&gt), "--gt", s(&gt), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[encoder]\nunknown = 1\n").unwrap();
    let out = modt(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = modt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = modt(&[
        "track",
        "--checkpoint",
        s(&dir.path().join("nope")),
        "--scans",
        s(dir.path()),
        "--out",
        s(&dir.path().join("t.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_continues_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);

    let half = dir.path().join("half.toml");
    fs::write(&half, SMALL.replace("iterations = 4", "iterations = 2")).unwrap();
    let (first, second, straight) = (dir.path().join("c1"), dir.path().join("c2"), dir.path().join("c3"));
    ok(&["train", "--config", s(&half), "--data", s(&data), "--out", s(&first)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&second), "--resume", s(&first)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight)]);

    let resumed = fs::read_to_string(second.join("loss.csv")).unwrap();
    let direct = fs::read_to_string(straight.join("loss.csv")).unwrap();
    assert_eq!(resumed.lines().count(), 5);
    assert_eq!(resumed, direct);
    assert_eq!(fs::read(second.join("tensors.bin")).unwrap(), fs::read(straight.join("tensors.bin")).unwrap());

    let tracks = dir.path().join("tracks.txt");
    let dets = dir.path().join("dets.txt");
    ok(&["track", "--checkpoint", s(&second), "--scans", s(&data), "--out", s(&tracks), "--detections", s(&dets)]);
    for line in fs::read_to_string(&tracks).unwrap().lines() {
        assert_eq!(line.split_whitespace().count(), 10, "{line}");
    }
    ok(&["eval", "--tracks", s(&tracks), "--gt", s(&data.join("gt.txt")), "--out", s(&dir.path().join("r"))]);
}
