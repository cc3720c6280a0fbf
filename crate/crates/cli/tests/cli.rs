use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vdenoise::checkpoint::save_checkpoint;
use vdenoise::image::{FrameSequence, Image};
use vdenoise::io::{list_pngs, write_frame_dir, write_png};
use vdenoise::model::{fold_batchnorm, BlockConfig, DenoiserParams};

fn vdenoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdenoise"))
        .args(args)
        .env_remove("VDENOISE_CHECKPOINT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn frame(h: usize, w: usize, salt: usize) -> Image {
    Image::from_fn(h, w, 3, |y, x, c| {
        let v = 0.5 + 0.3 * ((y as f64 + salt as f64) * 0.3).sin() * ((x as f64) * 0.2 + c as f64).cos();
        (v * 255.0).round() / 255.0
    })
}

fn frames_dir(root: &Path, name: &str, n: usize, h: usize, w: usize) -> PathBuf {
    let dir = root.join(name);
    let seq = FrameSequence::new((0..n).map(|i| frame(h, w, i)).collect()).unwrap();
    write_frame_dir(&dir, &seq).unwrap();
    dir
}

fn tiny_models(root: &Path) -> (PathBuf, PathBuf) {
    let s = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 1).unwrap();
    let t = DenoiserParams::init(BlockConfig::temporal().with_width(4).with_depth(3), 2).unwrap();
    let sp = root.join("spatial.ckpt");
    let tp = root.join("temporal.ckpt");
    save_checkpoint(&sp, &fold_batchnorm(&s).unwrap(), &Default::default()).unwrap();
    save_checkpoint(&tp, &fold_batchnorm(&t).unwrap(), &Default::default()).unwrap();
    (sp, tp)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn denoise_writes_frames_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path(), "frames", 3, 12, 14);
    let (sp, tp) = tiny_models(dir.path());
    let out_dir = dir.path().join("den");
    let out = vdenoise(&[
        "denoise", "--in", s(&input), "--out", s(&out_dir), "--sigma", "25",
        "--spatial", s(&sp), "--temporal", s(&tp), "--workers", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("\"flow_backend\": \"blockmatch\""));
    let written = list_pngs(&out_dir).unwrap();
    assert_eq!(written.len(), 3);
    assert!(written[0].ends_with("00000.png"));
}

#[test]
fn checkpoint_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path(), "frames", 2, 8, 8);
    tiny_models(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_vdenoise"))
        .args(["denoise", "--in", s(&input), "--out", s(&dir.path().join("o")), "--sigma", "10"])
        .env("VDENOISE_CHECKPOINT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn negative_sigma_is_a_usage_error() {
    let out = vdenoise(&["denoise", "--in", "a", "--out", "b", "--sigma", "-5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sigma"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = vdenoise(&["add-noise", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vdenoise(&[
        "add-noise", "--in", s(&dir.path().join("none")), "--out", s(&dir.path().join("o")), "--sigma", "5",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn add_noise_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path(), "frames", 2, 10, 10);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let out = vdenoise(&["add-noise", "--in", s(&input), "--out", s(o), "--sigma", "50", "--seed", "7"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for name in ["00000.png", "00001.png"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_ne!(fs::read(a.join("00000.png")).unwrap(), fs::read(input.join("00000.png")).unwrap());
}

#[test]
fn config_file_overrides_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path(), "frames", 2, 8, 8);
    let (sp, tp) = tiny_models(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"pipeline": {"flow_backend": "nonexistent"}}"#).unwrap();
    let o = dir.path().join("o");
    let base = [
        "denoise", "--in", s(&input), "--out", s(&o), "--sigma", "10",
        "--spatial", s(&sp), "--temporal", s(&tp), "--config", s(&cfg),
    ];
    let out = vdenoise(&base);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let mut with_flag = base.to_vec();
    with_flag.extend(["--flow", "identity"]);
    let out = vdenoise(&with_flag);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn mismatched_checkpoints_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path(), "frames", 2, 8, 8);
    let (sp, _) = tiny_models(dir.path());
    let out = vdenoise(&[
        "denoise", "--in", s(&input), "--out", s(&dir.path().join("o")), "--sigma", "10",
        "--spatial", s(&sp), "--temporal", s(&sp),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn train_both_blocks_then_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let images = root.join("images");
    fs::create_dir_all(&images).unwrap();
    for i in 0..2 {
        write_png(&images.join(format!("{i}.png")), &frame(56, 60, i)).unwrap();
    }
    let seqs = root.join("seqs");
    frames_dir(&seqs, "a", 5, 48, 48);
    let manifest = |kind: &str, corpus: &Path, patch: usize| {
        let path = root.join(format!("{kind}.json"));
        fs::write(
            &path,
            format!(
                r#"{{"kind": "{kind}", "corpus": "{}", "count": 4, "sigma_range_8bit": [0, 55], "seed": 1, "patch_size": {patch}}}"#,
                s(corpus)
            ),
        )
        .unwrap();
        path
    };
    let cfg = root.join("train.json");
    fs::write(&cfg, r#"{"train": {"depth": 3, "batch_size": 2}}"#).unwrap();
    let sp = root.join("s.ckpt");
    let tp = root.join("t.ckpt");
    let ck = root.join("ck");

    let out = vdenoise(&[
        "train-spatial", "--manifest", s(&manifest("spatial", &images, 50)), "--out", s(&sp),
        "--epochs", "2", "--width", "4", "--config", s(&cfg), "--checkpoint-dir", s(&ck),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(ck.join("spatial-epoch001.ckpt").exists());
    assert!(ck.join("spatial-train-log.jsonl").exists());

    let out = vdenoise(&[
        "train-temporal", "--manifest", s(&manifest("temporal", &seqs, 44)), "--out", s(&tp),
        "--spatial", s(&sp), "--epochs", "1", "--width", "4", "--config", s(&cfg),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let wrong_kind = vdenoise(&[
        "train-temporal", "--manifest", s(&manifest("spatial", &images, 50)), "--out", s(&tp),
        "--spatial", s(&sp), "--epochs", "1",
    ]);
    assert_eq!(wrong_kind.status.code(), Some(4));

    let report = root.join("report.json");
    let out = vdenoise(&[
        "benchmark", "--testset", s(&seqs), "--sigmas", "20,40", "--spatial", s(&sp),
        "--temporal", s(&tp), "--report", s(&report), "--timing", "--workers", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mean"), "{table}");
    assert!(table.contains("timing"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}
