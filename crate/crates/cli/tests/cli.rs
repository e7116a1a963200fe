//! Black-box tests against the compiled binary: exit codes, config
//! handling, and the train/eval/saliency/preprocess round trips.

use std::path::Path;
use std::process::{Command, Output};

fn meranet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meranet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let out = meranet(&["--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = meranet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // nothing else executed: no config echo on usage errors
    assert!(!stderr(&out).contains("stage_channels"));
}

#[test]
fn bad_config_exits_2_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"no_such_field": 1}"#).unwrap();
    let out = meranet(&["--config", path.to_str().unwrap(), "shapes"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("configuration error"), "{}", stderr(&out));
    assert!(stderr(&out).contains("no_such_field"));

    // invalid field value with a named diagnostic
    std::fs::write(&path, r#"{"variant": "resnet4d99"}"#).unwrap();
    let out = meranet(&["--config", path.to_str().unwrap(), "shapes"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("resnet4d99"));
}

#[test]
fn runtime_errors_exit_1() {
    let out = meranet(&["eval", "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn shapes_reports_the_full_chain() {
    let out = meranet(&["shapes"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for line in [
        "input: [3, 16, 112, 112]",
        "stem: [64, 16, 56, 56]",
        "block2_1: [128, 8, 28, 28]",
        "block3_1: [256, 4, 14, 14]",
        "block4_2: [512, 2, 7, 7]",
        "pooling: [512, 1, 1, 1]",
        "flatten: [512]",
        "dense: [3]",
    ] {
        assert!(text.contains(line), "missing {line:?} in:\n{text}");
    }
}

#[test]
fn params_reports_both_totals_and_references() {
    let out = meranet(&["params"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("resnet3d18 total: 33167811"), "{text}");
    assert!(text.contains("attention overhead 91088"), "{text}");
    assert!(text.contains("reference attention total: 33547552"), "{text}");
}

#[test]
fn config_echo_round_trips() {
    let out = meranet(&["--st-kernel", "3", "--t", "8", "shapes"]);
    assert_eq!(out.status.code(), Some(0));
    let echoed = stderr(&out);
    assert!(echoed.contains("\"st_kernel\": 3"), "{echoed}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("echo.json");
    std::fs::write(&path, &echoed).unwrap();
    let again = meranet(&["--config", path.to_str().unwrap(), "shapes"]);
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(stdout(&out), stdout(&again), "echoed config does not reproduce the run");
    assert_eq!(echoed, stderr(&again));
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
            "stage_channels": [4, 4, 4, 4],
            "st_kernel": 3,
            "t": 4,
            "train": {"epochs": 1, "batch_size": 8, "seed": 3}
        }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_eval_saliency_round_trip_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("run");

    let out = meranet(&["--config", &config, "train", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("training on 24 clips, validating on 6"));
    assert!(out_dir.join("metrics.csv").is_file());
    assert!(out_dir.join("checkpoint-best").is_dir());
    assert!(out_dir.join("checkpoint-final").is_dir());
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,val_loss,val_acc"), "{csv}");
    assert_eq!(csv.lines().count(), 2); // header + one epoch

    let ckpt = out_dir.join("checkpoint-final");
    let out = meranet(&["--config", &config, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("checkpoint from epoch 0"), "{text}");
    assert!(text.contains("confusion matrix"), "{text}");

    let sal_dir = dir.path().join("cam");
    let out = meranet(&[
        "--config",
        &config,
        "saliency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--class",
        "1",
        "--frame",
        "0",
        "--out",
        sal_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let listed = stdout(&out);
    assert!(listed.trim().ends_with(".pgm"), "{listed}");
    let pgm = Path::new(listed.trim());
    assert!(pgm.is_file());
    let bytes = std::fs::read(pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n112 112\n255\n"));

    // unknown layer is a runtime failure listing the recorded volumes
    let out = meranet(&["--config", &config, "saliency", "--layer", "block9_9/st"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("block4_2/st"), "{}", stderr(&out));
}

/// Writes a P6 PPM with a bright square whose position encodes the class.
fn write_ppm(path: &Path, class: usize, frame: usize) {
    let (h, w) = (16usize, 16usize);
    let mut body = vec![20u8; h * w * 3];
    let y0 = 2 + class * 4;
    let x0 = 2 + frame.min(8);
    for y in y0..(y0 + 4).min(h) {
        for x in x0..(x0 + 4).min(w) {
            for ch in 0..3 {
                body[(y * w + x) * 3 + ch] = 230;
            }
        }
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&body);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn preprocess_writes_tensors_statistics_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("raw");
    std::fs::create_dir_all(&data).unwrap();
    let mut clips = Vec::new();
    for i in 0..8 {
        let class = i % 2;
        let cdir = format!("clip{i}");
        std::fs::create_dir_all(data.join(&cdir)).unwrap();
        let mut frames = Vec::new();
        for f in 0..5 {
            let name = format!("f{f}.ppm");
            write_ppm(&data.join(&cdir).join(&name), class, f);
            frames.push(name);
        }
        clips.push(serde_json::json!({
            "dir": cdir,
            "frames": frames,
            "apex": 2,
            "label": class,
        }));
    }
    let manifest = serde_json::json!({
        "classes": ["negative", "positive"],
        "clips": clips,
    });
    std::fs::write(data.join("manifest.json"), manifest.to_string()).unwrap();

    let out_dir = dir.path().join("cooked");
    let out = meranet(&[
        "--t",
        "4",
        "preprocess",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let cooked: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(cooked["mean"].is_array() && cooked["std"].is_array());
    let cooked_clips = cooked["clips"].as_array().unwrap();
    assert_eq!(cooked_clips.len(), 8);
    for (i, c) in cooked_clips.iter().enumerate() {
        assert_eq!(c["tensor"], format!("clip{i}.mera"));
        assert!(c["split"].is_string(), "clip {i} missing split");
        assert!(out_dir.join(format!("clip{i}.mera")).is_file());
    }
    // every split assignment came from the stratified splitter
    let train_count = cooked_clips
        .iter()
        .filter(|c| c["split"] == "train")
        .count();
    assert!(train_count >= 2, "expected a training majority, got {train_count}");
}
