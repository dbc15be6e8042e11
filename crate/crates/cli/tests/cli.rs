use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gentron::guidance::sample_unguided;
use gentron::schedule::ScheduleState;
use gentron::trainer::load_checkpoint;
use gentron::{Frames, Rng, Tensor};
use gentron_cli::ppm::{dequantize, quantize, Image};

fn gentron(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gentron"))
        .args(args)
        .current_dir(dir)
        .env_remove("GENTRON_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let o = gentron(args, dir);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read_f32(path: &Path) -> Vec<f32> {
    fs::read(path).unwrap().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
}

/// Image and clip datasets plus a briefly trained image checkpoint.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_path_buf();
    ok(&["gen-data", "--kind", "shapes", "--n", "16", "--seed", "1", "--out", "shapes"], &d);
    ok(&["gen-data", "--kind", "shapes-video", "--n", "8", "--frames", "4", "--seed", "2", "--out", "clips"], &d);
    ok(&["train-t2i", "--dataset", "shapes", "--out", "t2i", "--steps", "20", "--batch", "4", "--seed", "3"], &d);
    (tmp, d)
}

#[test]
fn help_and_version_exit_zero() {
    let d = std::env::temp_dir();
    assert_eq!(code(&gentron(&["--help"], &d)), 0);
    assert_eq!(code(&gentron(&["--version"], &d)), 0);
    assert_eq!(code(&gentron(&["sample", "--help"], &d)), 0);
}

#[test]
fn usage_errors_exit_two() {
    let d = std::env::temp_dir();
    assert_eq!(code(&gentron(&[], &d)), 2);
    assert_eq!(code(&gentron(&["train-t2i", "--bogus"], &d)), 2);
    assert_eq!(code(&gentron(&["check", "--suite", "nope"], &d)), 2);
    assert_eq!(code(&gentron(&["gen-data", "--kind", "gaussians", "--clusters", "9", "--out", "x"], &d)), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["gen-data", "--kind", "gaussians", "--n", "40", "--clusters", "3", "--seed", "9", "--out", out], tmp.path());
    }
    for f in ["manifest.json", "latents.bin"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let (_tmp, d) = workspace();
    for f in ["model.ckpt", "loss.csv", "run_manifest.json"] {
        assert!(d.join("t2i").join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(d.join("t2i/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn fixed_seed_gives_identical_csv() {
    let (_tmp, d) = workspace();
    ok(&["train-t2i", "--dataset", "shapes", "--out", "again", "--steps", "20", "--batch", "4", "--seed", "3"], &d);
    let a = fs::read(d.join("t2i/loss.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("again/loss.csv")).unwrap());
    ok(&["train-t2i", "--dataset", "shapes", "--out", "other", "--steps", "20", "--batch", "4", "--seed", "4"], &d);
    assert_ne!(a, fs::read(d.join("other/loss.csv")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let (_tmp, d) = workspace();
    let run = |out: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gentron"));
        c.args(["train-t2i", "--dataset", "shapes", "--out", out, "--steps", "20", "--batch", "4"]).current_dir(&d);
        match env {
            Some(v) => c.env("GENTRON_SEED", v),
            None => c.env_remove("GENTRON_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(d.join(out).join("loss.csv")).unwrap()
    };
    assert_eq!(run("env3", Some("3")), fs::read(d.join("t2i/loss.csv")).unwrap());
    assert_ne!(run("env0", None), run("env5", Some("5")));
}

#[test]
fn missing_dataset_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gentron(&["train-t2i", "--dataset", "does-not-exist", "--out", "run"], tmp.path());
    assert_eq!(code(&o), 2);
    let o = gentron(&["train-t2i", "--out", "run"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("typo.json"), r#"{"train": {"p_motionfree": 0.2}}"#).unwrap();
    fs::write(d.join("bad.json"), r#"{"train": {"p_text_drop": 1.5}}"#).unwrap();
    for cfg in ["typo.json", "bad.json", "absent.json"] {
        let o = gentron(&["train-t2i", "--config", cfg, "--out", "run"], d);
        assert_eq!(code(&o), 2, "{cfg}");
    }
}

#[test]
fn config_file_drives_training() {
    let (_tmp, d) = workspace();
    fs::write(d.join("run.json"), r#"{"seed": 3, "dataset": "shapes", "train": {"steps": 20, "batch": 4}}"#).unwrap();
    ok(&["train-t2i", "--config", "run.json", "--out", "from_cfg"], &d);
    assert_eq!(fs::read(d.join("from_cfg/loss.csv")).unwrap(), fs::read(d.join("t2i/loss.csv")).unwrap());
}

#[test]
fn damaged_checkpoint_exits_three() {
    let (_tmp, d) = workspace();
    let bytes = fs::read(d.join("t2i/model.ckpt")).unwrap();
    fs::write(d.join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    for ck in ["short.ckpt", "junk.ckpt", "missing.ckpt"] {
        let o = gentron(&["sample", "--checkpoint", ck, "--prompt", "square top left", "--out", "s"], &d);
        assert_eq!(code(&o), 3, "{ck}");
    }
}

#[test]
fn sample_image_writes_frame_and_manifest() {
    let (_tmp, d) = workspace();
    let out = ok(&["sample", "--checkpoint", "t2i/model.ckpt", "--prompt", "cross bottom right", "--out", "img"], &d);
    assert!(out.contains("lambda_t=7.5"), "{out}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("img/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["lambda_t"], 7.5);
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 1);
    let img = Image::read(&d.join("img/frame_000.ppm")).unwrap();
    assert_eq!((img.width, img.height), (8, 8));
    let latents = read_f32(&d.join("img/latents.bin"));
    assert_eq!(latents.len(), 8 * 8 * 4);
    for (px, chunk) in img.rgb.chunks_exact(3).zip(latents.chunks_exact(4)) {
        for c in 0..3 {
            assert_eq!(px[c], quantize(chunk[c]));
            assert!((dequantize(px[c]) - chunk[c].clamp(-1.0, 1.0)).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn sample_is_deterministic() {
    let (_tmp, d) = workspace();
    for out in ["a", "b"] {
        ok(&["sample", "--checkpoint", "t2i/model.ckpt", "--prompt", "square top left", "--seed", "5", "--out", out], &d);
    }
    assert_eq!(fs::read(d.join("a/latents.bin")).unwrap(), fs::read(d.join("b/latents.bin")).unwrap());
    assert_eq!(fs::read(d.join("a/frame_000.ppm")).unwrap(), fs::read(d.join("b/frame_000.ppm")).unwrap());
}

#[test]
fn mode_mismatch_is_an_error() {
    let (_tmp, d) = workspace();
    let o = gentron(&["sample", "--checkpoint", "t2i/model.ckpt", "--prompt", "x", "--motion", "--out", "s"], &d);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("video checkpoint"));
}

fn finetune(d: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "finetune-t2v", "--checkpoint", "t2i/model.ckpt", "--images", "shapes", "--videos", "clips", "--out", out,
        "--steps", "6", "--batch", "2", "--seed", "4",
    ];
    args.extend_from_slice(extra);
    gentron(&args, d)
}

#[test]
fn finetune_records_motion_free_probability() {
    let (_tmp, d) = workspace();
    let o = finetune(&d, "t2v", &["--p-motion-free", "0.35"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("inflation identity"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t2v/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["p_motion_free"], 0.35);
    assert_eq!(m["config"]["train"]["p_motion_free"], 0.35);
    assert_eq!(m["inflation_gap"], 0.0);
    let csv = fs::read_to_string(d.join("t2v/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,branch"));
    assert!(load_checkpoint(d.join("t2v/model.ckpt")).unwrap().inflated);
}

#[test]
fn finetune_rejects_video_checkpoint() {
    let (_tmp, d) = workspace();
    assert_eq!(code(&finetune(&d, "t2v", &[])), 0);
    let o = gentron(
        &["finetune-t2v", "--checkpoint", "t2v/model.ckpt", "--images", "shapes", "--videos", "clips", "--out", "x"],
        &d,
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn finetune_needs_video_dataset() {
    let (_tmp, d) = workspace();
    let o = gentron(&["finetune-t2v", "--checkpoint", "t2i/model.ckpt", "--images", "shapes", "--out", "x"], &d);
    assert_eq!(code(&o), 2);
    let o = gentron(&["finetune-t2v", "--checkpoint", "t2i/model.ckpt", "--videos", "shapes", "--out", "x"], &d);
    assert_eq!(code(&o), 3);
}

#[test]
fn unit_scales_reproduce_conditional_sampling() {
    let (_tmp, d) = workspace();
    assert_eq!(code(&finetune(&d, "t2v", &[])), 0);
    let out = ok(
        &[
            "sample", "--checkpoint", "t2v/model.ckpt", "--prompt", "square moving up", "--motion", "--lambda-t", "1.0",
            "--lambda-m", "1.0", "--frames", "4", "--seed", "11", "--out", "clip",
        ],
        &d,
    );
    assert!(out.contains("lambda_m=1"), "{out}");
    for t in 0..4 {
        assert!(d.join(format!("clip/frame_{t:03}.ppm")).is_file());
    }
    let got = read_f32(&d.join("clip/latents.bin"));

    let model = load_checkpoint(d.join("t2v/model.ckpt")).unwrap().into_model().unwrap();
    let schedule = ScheduleState::scaled_linear(50).unwrap();
    let cond = model.encode("square moving up");
    let want: Tensor =
        sample_unguided(&model, &schedule, &[cond], &Frames::full_motion(4), &mut Rng::new(11)).unwrap();
    assert_eq!(got.len(), want.numel());
    assert!(got.iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn check_suites_exit_zero() {
    let d = std::env::temp_dir();
    for suite in ["schedule", "guidance", "video-identity"] {
        let out = ok(&["check", "--suite", suite], &d);
        assert!(out.contains("0 failed"), "{out}");
        assert!(!out.contains("[FAIL]"));
    }
}
