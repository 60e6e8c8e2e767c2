//! The `misra` binary end to end, including exit codes.

use std::path::Path;
use std::process::{Command, Output};

use misra::imageio::write_gray_png;
use misra::synth::mask_path;
use misra_harness::HarnessError;
use tempfile::TempDir;

fn misra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_misra")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = misra(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str, size: &str) {
    ok(&["gen-synth", "--out", p(dir), "--count", count, "--seed", "2", "--size", size, "--split", "0.75"]);
}

#[test]
fn full_workflow() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "8", "32x32");
    assert!(data.join("manifest.json").is_file() && data.join("00007_mask.png").is_file());

    let stats: serde_json::Value = serde_json::from_slice(&ok(&["stats", "--data", p(&data)]).stdout).unwrap();
    assert_eq!(stats["scenes"], 8);
    let total: f64 =
        stats["classes"].as_object().unwrap().values().map(|c| c["pixel_fraction"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    let json = serde_json::json!({
        "data": data, "out": run, "epochs": 1, "base_width": 8, "seed": 5
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    ok(&["train", "--config", p(&cfg)]);
    let ckpt = run.join("final.msra");
    assert!(ckpt.is_file() && run.join("final.json").is_file() && run.join("loss.csv").is_file());

    let report = tmp.path().join("report.json");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    for key in ["mcIoU", "ISI-IoU", "mDice", "mAP50", "mAP95"] {
        assert!(r[key].is_number(), "{key}");
    }
    let per: Vec<&String> = r["per_class"].as_object().unwrap().keys().collect();
    assert_eq!(per, ["LAV", "LNH", "ND", "RAV", "RNH", "WR"]);

    let image = data.join("00006.png");
    let out = tmp.path().join("pred.png");
    ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&image), "--out", p(&out), "--per-iteration"]);
    let names = ["pred.png", "pred_t0.png", "pred_t1.png", "pred_t2.png"];
    for n in names {
        assert!(tmp.path().join(n).is_file(), "{n}");
    }
    let masks: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("pred"))
        .collect();
    assert_eq!(masks.len(), 4);
    let first = std::fs::read(&out).unwrap();
    ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&image), "--out", p(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
    let mask = misra::imageio::read_mask_png(&out).unwrap();
    assert_eq!((mask.height(), mask.width()), (32, 32));
}

#[test]
fn preprocess_dumps_five_channels() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "1", "20x27");
    let arch = tmp.path().join("x.msra");
    let dbg = tmp.path().join("dbg");
    let image = data.join("00000.png");
    // 20x27 is not a multiple of 8 without padding.
    assert_eq!(misra(&["preprocess", "--image", p(&image), "--out", p(&arch)]).status.code(), Some(3));
    ok(&["preprocess", "--image", p(&image), "--out", p(&arch), "--debug-dir", p(&dbg), "--pad"]);
    let a = misra::archive::TensorArchive::load(&arch).unwrap();
    assert_eq!(a.get("input").unwrap().shape(), &[5, 24, 32]);
    for name in ["channel0_r", "channel1_g", "channel2_b", "channel3_erosion", "channel4_dilation"] {
        assert!(dbg.join(format!("{name}.png")).is_file(), "{name}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    for text in [r#"{"lr": -1}"#, r#"{"no_such_field": 1}"#, "not json", r#"{"base_width": 4}"#] {
        std::fs::write(&cfg, text).unwrap();
        assert_eq!(misra(&["train", "--config", p(&cfg)]).status.code(), Some(2), "{text}");
    }
    assert_eq!(misra(&["train", "--config", p(&tmp.path().join("missing.json"))]).status.code(), Some(2));
    let bad_size = misra(&["gen-synth", "--out", p(tmp.path()), "--count", "1", "--size", "8x8"]);
    assert_eq!(bad_size.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(misra(&["stats", "--data", p(&data)]).status.code(), Some(3));

    gen(&data, "2", "16x16");
    write_gray_png(mask_path(&data, 1), 16, 16, &[9; 256]).unwrap();
    let out = misra(&["stats", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let img = tmp.path().join("img.png");
    std::fs::write(&img, b"not a png").unwrap();
    let out = tmp.path().join("o.png");
    assert_eq!(misra(&["preprocess", "--image", p(&img), "--out", p(&out)]).status.code(), Some(3));
}

#[test]
fn exit_code_table() {
    assert_eq!(HarnessError::Config(String::new()).exit_code(), 2);
    assert_eq!(HarnessError::Data(String::new()).exit_code(), 3);
    assert_eq!(HarnessError::Numeric(String::new()).exit_code(), 4);
    let e: HarnessError = misra::Error::DegenerateStatistics { op: "batch_norm", detail: String::new() }.into();
    assert_eq!(e.exit_code(), 4);
}
