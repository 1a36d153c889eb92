use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
preset = "smmnist-desk"
name = "tiny"
seed = 3

[model]
image_size = 16
feature_dim = 8
latent_pixel = 3
latent_flow = 3
rnn_width = 8
encoder_channels = [4, 8]
mask_width = 4

[rollout]
t_cond = 3
t_pred = 3

[train]
batch_size = 4
epochs = 2
updates_per_epoch = 3
validation_videos = 2
log_every = 1

[data]
videos = 40
synthetic_glyphs = 20

[data.generator]
canvas = 16
glyph_size = 8
frames = 8

[eval]
n_samples = 3
chunk = 2
"#;

fn slamp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slamp"))
        .current_dir(dir)
        .args(args)
        .env_remove("SLAMP_DATA")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Vec<PathBuf> {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(PathBuf::from)
        .collect()
}

/// A temp dir holding `tiny.toml`, a dataset and a trained checkpoint.
fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&slamp(dir.path(), &["make-data", "--config", "tiny.toml", "--out", "data"]));
    ok(&slamp(
        dir.path(),
        &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"],
    ));
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let dir = trained();
    let p = dir.path();
    for f in ["data/header.json", "data/splits.json", "data/manifest.json", "run/latest.ckpt", "run/train.ndjson"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(p.join("run/train.ndjson")).unwrap();
    assert!(log.lines().count() >= 6);
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let eval = ["evaluate", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/latest.ckpt"];
    let first = ok(&slamp(p, &[&eval[..], &["--out", "ev1"]].concat()));
    assert!(first.iter().any(|a| a.ends_with("psnr_curve.png")));
    ok(&slamp(p, &[&eval[..], &["--out", "ev2"]].concat()));
    let (a, b) = (json(&p.join("ev1/report.json")), json(&p.join("ev2/report.json")));
    assert_eq!(a, b);
    assert_eq!(a["n"], 3);
    assert_eq!(a["ci_over"], "videos");
    assert_eq!(a["curves"][0]["per_frame"].as_array().unwrap().len(), 3);

    let manifest = json(&p.join("ev1/manifest.json"));
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["code_hash"].as_str().unwrap().len(), 64);

    let samples = ok(&slamp(
        p,
        &["sample", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/latest.ckpt", "--out", "sm", "--n-samples", "2"],
    ));
    let grid = image::open(p.join("sm/sample_000.png")).unwrap();
    assert!(grid.width() > 6 * 16 && grid.height() > 6 * 16);
    assert!(samples.iter().any(|a| a.ends_with("diversity.png")));

    let flows = ok(&slamp(
        p,
        &["visualize-flow", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/latest.ckpt", "--out", "vf"],
    ));
    assert!(flows.iter().any(|a| a.ends_with("color_wheel.png")));
}

#[test]
fn resume_continues_from_the_checkpoint_step() {
    let dir = trained();
    let p = dir.path();
    ok(&slamp(
        p,
        &["train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--resume", "run/latest.ckpt"],
    ));
    let last: serde_json::Value = fs::read_to_string(p.join("run/train.ndjson"))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|r| r.get("epsilon").is_some())
        .last()
        .unwrap();
    assert_eq!(last["step"], 12);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = trained();
    let p = dir.path();
    let code = |args: &[&str]| slamp(p, args).status.code();

    assert_eq!(code(&["make-data", "--config", "missing.toml", "--out", "x"]), Some(2));
    fs::write(p.join("bad.toml"), "[model]\nno_such_field = 1\n").unwrap();
    assert_eq!(code(&["make-data", "--config", "bad.toml", "--out", "x"]), Some(2));

    fs::write(p.join("blocker"), b"").unwrap();
    assert_eq!(code(&["make-data", "--config", "tiny.toml", "--out", "blocker/sub"]), Some(3));

    fs::write(p.join("huge.toml"), TINY.replace("mask_width = 4", "mask_width = 4\nbeta = 1e308")).unwrap();
    assert_eq!(code(&["train", "--config", "huge.toml", "--data", "data", "--out", "nan"]), Some(4));
    assert!(p.join("nan/nonfinite.ckpt").exists());

    assert_eq!(
        code(&["train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--variant", "baseline", "--resume", "run/latest.ckpt"]),
        Some(5)
    );
    fs::write(p.join("wide.toml"), TINY.replace("rnn_width = 8", "rnn_width = 9")).unwrap();
    assert_eq!(
        code(&["evaluate", "--config", "wide.toml", "--data", "data", "--checkpoint", "run/latest.ckpt", "--out", "e"]),
        Some(5)
    );
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();
    let out = slamp(p, &["make-data", "--config", "tiny.toml", "--out", "data", "--dry-run"]);
    assert!(out.status.success());
    assert!(!p.join("data").exists());
}
