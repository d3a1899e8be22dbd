use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rdet_core::image::Image;
use rdet_core::model_io::{init_zeros, save_weights, ModelConfig};

const SMALL: [&str; 6] = ["--set", "model.input_h=96", "--set", "model.input_w=96", "--set", "backbone.kind=repvgg"];

fn rdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_images(dir: &Path) -> Vec<String> {
    [(80, 120), (96, 96)]
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| {
            let p = dir.join(format!("im{i}.ppm"));
            Image::synthetic(h, w, i as u64).write_ppm(&p).unwrap();
            p.display().to_string()
        })
        .collect()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn predict_writes_jsonl_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = write_images(dir.path());
    let out = dir.path().join("out");
    let mut args = vec!["predict", "--random-weights", "--seed", "1", "--set", "export.score_thresh=0.5"];
    args.extend(SMALL);
    args.extend(["--out", out.to_str().unwrap(), "--images"]);
    args.extend(imgs.iter().map(String::as_str));
    let o = rdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = std::fs::read_to_string(out.join("detections.jsonl")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, img) in lines.iter().zip(&imgs) {
        assert!(line.starts_with("{\"image\":"));
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["image"], img.as_str());
        for d in v["detections"].as_array().unwrap() {
            assert_eq!(d["box"].as_array().unwrap().len(), 4);
            assert!(d["score"].as_f64().unwrap() > 0.5);
            assert!(d["class"].as_u64().unwrap() < 80);
        }
    }
    let annotated = Image::read_ppm(&out.join("0000_im0.ppm")).unwrap();
    assert_eq!((annotated.h, annotated.w), (80, 120));
    assert!(out.join("0001_im1.ppm").exists());
}

#[test]
fn zero_weights_detect_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = write_images(dir.path());
    let cfg = ModelConfig::pai_yolox_s().with_input(96, 96);
    let weights = dir.path().join("zeros.bin");
    save_weights(&init_zeros(&cfg).unwrap(), &weights).unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["predict", "--weights", weights.to_str().unwrap(), "--set", "export.score_thresh=0.5"];
    args.extend(SMALL);
    args.extend(["--no-annotate", "--out", out.to_str().unwrap(), "--images", &imgs[0]]);
    let o = rdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("detections.jsonl")).unwrap();
    assert_eq!(text.trim(), format!("{{\"image\":\"{}\",\"detections\":[]}}", imgs[0]));
    assert!(!out.join("0000_im0.ppm").exists());
}

#[test]
fn exit_codes_distinguish_io_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = write_images(dir.path());
    let out = dir.path().join("out");
    let missing = dir.path().join("nowhere.bin");

    let o = rdet(&["predict", "--weights", missing.to_str().unwrap(), "--out", out.to_str().unwrap(), "--images", &imgs[0]]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.bin"), "{}", stderr(&o));

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not weights at all").unwrap();
    let o = rdet(&["predict", "--weights", garbage.to_str().unwrap(), "--out", out.to_str().unwrap(), "--images", &imgs[0]]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "neck.kind = pafpn\nhead.tood_stack = 9\n").unwrap();
    let o = rdet(&["inspect", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.conf"), "{}", stderr(&o));

    let o = rdet(&["inspect", "--set", "neck.kind=fpn"]);
    assert_eq!(o.status.code(), Some(3));
    let o = rdet(&["predict", "--out", out.to_str().unwrap(), "--images", &imgs[0]]);
    assert_eq!(o.status.code(), Some(3));
    let o = rdet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fuse_twice_reports_nothing_left() {
    let dir = tempfile::tempdir().unwrap();
    let once = dir.path().join("once.bin");
    let twice = dir.path().join("twice.bin");
    let mut args = vec!["fuse", "--random-weights", "--out", once.to_str().unwrap()];
    args.extend(SMALL);
    let o = rdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("fused "));

    let mut args = vec!["fuse", "--weights", once.to_str().unwrap(), "--out", twice.to_str().unwrap()];
    args.extend(SMALL);
    let o = rdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("no fusable nodes"), "{text}");
    assert_eq!(std::fs::read(&once).unwrap(), std::fs::read(&twice).unwrap());
}

#[test]
fn inspect_reports_baseline_size() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cost.json");
    let conf = configs_dir().join("yolox_s.conf");
    let o = rdet(&["inspect", "--config", conf.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("deploy form at 640x640"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let params = v["deploy"]["total"]["params"].as_f64().unwrap() / 1e6;
    assert!((params - 9.0).abs() / 9.0 < 0.02, "{params}");
}

#[test]
fn preset_configs_all_parse() {
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let o = rdet(&["inspect", "--config", path.to_str().unwrap(), "--set", "model.input_h=64", "--set", "model.input_w=64"]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
    }
}

#[test]
fn bench_table_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = write_images(dir.path());
    let out = dir.path().join("bench");
    let mut args = vec!["bench", "--random-weights", "--iters", "1", "--warmup", "0"];
    args.extend(SMALL);
    args.extend(["--out", out.to_str().unwrap(), "--images", &imgs[1]]);
    let o = rdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("bench.txt")).unwrap();
    assert_eq!(stdout(&o), table);
    let rows: Vec<_> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let configs = v["configs"].as_array().unwrap();
    assert_eq!(configs.len(), 8);
    for (row, c) in rows.iter().zip(configs) {
        let cols: Vec<_> = row.split_whitespace().collect();
        assert_eq!(cols[0], c["fuse_reparam"].to_string());
        assert_eq!(cols[1], c["fuse_preprocess"].to_string());
        assert_eq!(cols[2], c["nms_mode"].as_str().unwrap());
        let med = c["stages_ms"]["end2end"]["median"].as_f64().unwrap();
        assert_eq!(cols[cols.len() - 2], format!("{med:.3}"));
    }
}

#[test]
fn selftest_passes() {
    let o = rdet(&["selftest", "--seed", "5", "--threads", "2"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all 8 checks passed"));
}
