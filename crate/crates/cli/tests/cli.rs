use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathdiff::dataset::KeypointFile;
use pathdiff::gcode::parse_program;
use pathdiff::geometry::SliceImage;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathdiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn pathdiff")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap_or(-1)
}

fn build_small(dir: &Path, seed: &str) {
    ok(
        dir,
        &["build-data", "--synthetic", "square,rectangle,circle x rectilinear,concentric", "--count", "8", "--n-max", "32", "--seed", seed, "--out", "data"],
    );
}

fn train_small(dir: &Path, epochs: &str) {
    ok(dir, &["train", "--data", "data", "--out", "train", "--epochs", epochs, "--seed", "1"]);
}

fn checksum(stdout: &str) -> String {
    stdout.lines().find(|l| l.contains("checksum")).expect("checksum line").to_string()
}

fn curve(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("training_curve.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synthetic_build_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let a = ok(
        d.path(),
        &["build-data", "--synthetic", "square,circle,annulus x rectilinear,concentric", "--count", "64", "--n-max", "64", "--seed", "9", "--out", "a"],
    );
    let b = ok(
        d.path(),
        &["build-data", "--synthetic", "square,circle,annulus x rectilinear,concentric", "--count", "64", "--n-max", "64", "--seed", "9", "--out", "b"],
    );
    assert!(a.contains("64"));
    assert_eq!(checksum(&a), checksum(&b));
    assert_eq!(fs::read_dir(d.path().join("a/images")).unwrap().count(), 64);
    let c = ok(
        d.path(),
        &["build-data", "--synthetic", "square,circle,annulus x rectilinear,concentric", "--count", "64", "--n-max", "64", "--seed", "10", "--out", "c"],
    );
    assert_ne!(checksum(&a), checksum(&c));
}

#[test]
fn empty_stl_dir_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("empty")).unwrap();
    assert_eq!(code(d.path(), &["build-data", "--stl", "empty", "--out", "data"]), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "error");
    assert_eq!(manifest["exit_code"], 2);
}

#[test]
fn train_missing_data_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(d.path(), &["train", "--data", "nowhere", "--out", "train"]), 2);
}

#[test]
fn training_loss_trends_down() {
    let d = tempfile::tempdir().unwrap();
    build_small(d.path(), "2");
    let cfg = d.path().join("fast.cfg");
    fs::write(&cfg, "lr = 1e-3\nsteps = 100\n").unwrap();
    ok(d.path(), &["train", "--data", "data", "--out", "train", "--epochs", "50", "--seed", "1", "--config", "fast.cfg"]);
    let rows = curve(&d.path().join("train"));
    assert_eq!(rows.len(), 50);
    let loss = |r: &[Vec<String>]| r.iter().map(|c| c[1].parse::<f64>().unwrap()).sum::<f64>() / r.len() as f64;
    let (head, tail) = (loss(&rows[..10]), loss(&rows[40..]));
    assert!(tail < head, "first 10 epochs {head}, last 10 {tail}");
    for f in ["last.ckpt", "best.ckpt", "run_manifest.json"] {
        assert!(d.path().join("train").join(f).exists(), "{f}");
    }
}

#[test]
fn resume_continues_exactly() {
    let d = tempfile::tempdir().unwrap();
    build_small(d.path(), "3");
    ok(d.path(), &["train", "--data", "data", "--out", "full", "--epochs", "4", "--seed", "1"]);
    ok(d.path(), &["train", "--data", "data", "--out", "half", "--epochs", "2", "--seed", "1"]);
    ok(d.path(), &["train", "--data", "data", "--out", "half", "--epochs", "4", "--seed", "1", "--resume", "half/last.ckpt"]);
    assert_eq!(curve(&d.path().join("full")), curve(&d.path().join("half")));
    assert_eq!(fs::read(d.path().join("full/last.ckpt")).unwrap(), fs::read(d.path().join("half/last.ckpt")).unwrap());
}

#[test]
fn generate_emit_evaluate() {
    let d = tempfile::tempdir().unwrap();
    build_small(d.path(), "4");
    train_small(d.path(), "2");
    let image = "data/images/000000.pgm";
    ok(d.path(), &["generate", "--checkpoint", "train/last.ckpt", "--image", image, "--runs", "3", "--seed", "5", "--length", "20", "--trace", "--out", "g1"]);
    ok(d.path(), &["generate", "--checkpoint", "train/last.ckpt", "--image", image, "--runs", "3", "--seed", "5", "--length", "20", "--out", "g2"]);
    let load = |p: &str| KeypointFile::load(&d.path().join(p)).unwrap();
    let runs: Vec<KeypointFile> = (0..3).map(|k| load(&format!("g1/run_{k}.json"))).collect();
    assert!(runs.iter().all(|r| r.keypoints.len() == 20));
    assert_ne!(runs[0].keypoints, runs[1].keypoints);
    assert_ne!(runs[1].keypoints, runs[2].keypoints);
    assert_eq!(runs[0].keypoints, load("g2/run_0.json").keypoints);
    assert!(d.path().join("g1/trace_run_0.csv").exists());
    assert!(d.path().join("g1/condition.pgm").exists());

    ok(d.path(), &["emit", "--keypoints", "g1/run_0.json", "--scale-mm", "10", "--center", "100", "100", "--out", "run_0.gcode"]);
    let layers = parse_program(&fs::read_to_string(d.path().join("run_0.gcode")).unwrap()).unwrap();
    assert_eq!(layers.len(), 1);
    assert_eq!(layers[0].keypoints.len(), 20);
    let k = &layers[0].keypoints;
    assert!(k.iter().all(|p| (p.x - 100.0).abs() <= 10.0 + 1e-4 && (p.y - 100.0).abs() <= 10.0 + 1e-4));
    assert!(k.windows(2).all(|w| w[1].e >= w[0].e));
    assert!(d.path().join("run_0.gcode.manifest.json").exists());

    assert_eq!(code(d.path(), &["emit", "--keypoints", "g1/run_0.json", "--scale-mm", "500", "--out", "big.gcode"]), 5);
    assert!(!d.path().join("big.gcode").exists());
    ok(d.path(), &["emit", "--keypoints", "g1/run_0.json", "--scale-mm", "500", "--force", "--out", "big.gcode"]);
    assert!(d.path().join("big.gcode").exists());

    for k in 1..3 {
        ok(d.path(), &["emit", "--keypoints", &format!("g1/run_{k}.json"), "--scale-mm", "10", "--center", "100", "100", "--out", &format!("run_{k}.gcode")]);
    }
    ok(d.path(), &["evaluate", "--truth", "run_0.gcode", "--generated", "run_0.gcode", "--out", "same"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("same/summary.json")).unwrap()).unwrap();
    assert!(summary["reduction_percent"].as_f64().unwrap().abs() < 1e-12);
    assert!((summary["mean_iou"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    ok(d.path(), &["evaluate", "--truth", "run_0.gcode", "--generated", "run_0.gcode", "run_1.gcode", "run_2.gcode", "--out", "three"]);
    let svg = fs::read_to_string(d.path().join("three/kde.svg")).unwrap();
    assert!(svg.contains("ci-band"));
    for f in ["distances.csv", "overlap.csv", "summary.csv", "overlap.svg", "scatter.svg"] {
        assert!(d.path().join("three").join(f).exists(), "{f}");
    }

    fs::write(d.path().join("two.gcode"), "G1 Z0.2\nG1 X1 Y1 E1\nG1 Z0.4\nG1 X2 Y2 E2\n").unwrap();
    assert_eq!(code(d.path(), &["evaluate", "--truth", "run_0.gcode", "--generated", "two.gcode", "--out", "bad"]), 2);
}

#[test]
fn blank_photo_has_no_contour() {
    let d = tempfile::tempdir().unwrap();
    build_small(d.path(), "6");
    train_small(d.path(), "1");
    let mut blank = SliceImage::blank();
    blank.pixels.iter_mut().for_each(|p| *p = 0.5);
    fs::write(d.path().join("blank.pgm"), blank.to_pgm()).unwrap();
    assert_eq!(code(d.path(), &["generate", "--checkpoint", "train/last.ckpt", "--photo", "blank.pgm", "--out", "g"]), 4);
}
