use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfekit::postprocess::{write_detections, DetectionRecord};
use cfekit::synth::load_annotations;
use serde_json::Value;

fn cfekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfekit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cfekit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, count: &str) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    ok(&["gen", "--seed", seed, "--count", count, "--out", s(&data)]);
    data
}

fn artifacts(dir: &Path) -> Value {
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["artifacts"].clone()
}

fn train(data: &Path, out: &Path, variant: &str) {
    ok(&[
        "train", "--data", s(data), "--variant", variant, "--epochs", "1", "--batch-size", "8", "--widths", "4,8,8", "--out", s(out),
    ]);
}

#[test]
fn gen_is_reproducible_and_checksummed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "4", "20");
    let b = tmp.path().join("again");
    ok(&["gen", "--seed", "4", "--count", "20", "--out", s(&b)]);
    let (ma, mb) = (artifacts(&a), artifacts(&b));
    assert_eq!(ma, mb);
    let files = ma.as_object().unwrap();
    assert!(files.contains_key("annotations.json") && files.contains_key("train.txt"));
    assert_eq!(files.keys().filter(|k| k.starts_with("images/")).count(), 20);
    let ids = |split: &str| fs::read_to_string(a.join(format!("{split}.txt"))).unwrap().lines().count();
    assert_eq!((ids("train"), ids("val"), ids("test")), (14, 2, 4));
    let c = gen(tmp.path(), "5", "20");
    assert_ne!(artifacts(&c)["annotations.json"], ma["annotations.json"]);
}

#[test]
fn train_and_eval_are_bit_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "1", "40");
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    train(&data, &r1, "cfenet_full");
    train(&data, &r2, "cfenet_full");
    assert_eq!(fs::read(r1.join("weights.bin")).unwrap(), fs::read(r2.join("weights.bin")).unwrap());
    assert_eq!(artifacts(&r1), artifacts(&r2));

    let weights = r1.join("weights.bin");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--data", s(&data), "--weights", s(&weights), "--score-threshold", "0.2", "--out", s(e)]);
    }
    for f in ["report.json", "per_category.csv", "detections.jsonl"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let ms = tmp.path().join("ms");
    ok(&["eval", "--data", s(&data), "--weights", s(&weights), "--multiscale", "0.75,1.0,1.5", "--iou-mode", "bdd70", "--out", s(&ms)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ms.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["iou_mode"], "bdd70");
    assert_eq!(report["headline"], report["ap_iou70"]);
}

#[test]
fn perfect_detections_score_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "2", "60");
    let file = load_annotations(&data.join("annotations.json")).unwrap();
    let val: Vec<u64> = fs::read_to_string(data.join("val.txt")).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    let dets: Vec<DetectionRecord> = file
        .annotations
        .iter()
        .filter(|a| val.contains(&a.image_id))
        .map(|a| DetectionRecord { image_id: a.image_id, category_id: a.category_id, bbox: a.bbox, score: 1.0 })
        .collect();
    assert!(!dets.is_empty());
    let path = tmp.path().join("oracle.jsonl");
    write_detections(&mut fs::File::create(&path).unwrap(), &dets).unwrap();
    for mode in ["coco", "bdd70"] {
        let out = tmp.path().join(format!("eval_{mode}"));
        ok(&["eval", "--data", s(&data), "--detections", s(&path), "--iou-mode", mode, "--out", s(&out)]);
        let r: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        let mut checked = 0;
        for key in ["headline", "ap_5095", "ap_50", "ap_75", "ap_iou70", "ap_small", "ap_medium", "ap_large", "s_map"] {
            if let Some(v) = r[key].as_f64() {
                assert_eq!(v, 100.0, "{mode} {key}");
                checked += 1;
            }
        }
        assert!(checked >= 6);
        for v in r["ap_per_iou"].as_array().unwrap() {
            assert_eq!(v.as_f64(), Some(100.0));
        }
        for c in r["per_category"].as_array().unwrap() {
            for key in ["ap", "ap_50", "ap_75", "ap_5095"] {
                if let Some(v) = c[key].as_f64() {
                    assert_eq!(v, 100.0, "{mode} {key} of {}", c["name"]);
                }
            }
        }
    }
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let code = |args: &[&str]| cfekit(args).status.code().unwrap();

    assert_eq!(code(&["gen", "--count", "0", "--out", s(&out)]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let missing = tmp.path().join("nowhere");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out)]), 2);

    let data = gen(tmp.path(), "3", "20");
    assert_eq!(code(&["train", "--data", s(&data), "--variant", "yolo", "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--data", s(&data), "--widths", "4,8", "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--data", s(&data), "--split", "holdout", "--out", s(&out)]), 2);
    assert_eq!(code(&["eval", "--data", s(&data), "--out", s(&out)]), 1);
    let garbage = tmp.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--detections", s(&garbage), "--out", s(&out)]), 2);
    assert_eq!(code(&["eval", "--data", s(&data), "--detections", s(&garbage), "--iou-mode", "voc", "--out", s(&out)]), 1);
}

#[test]
fn gradcheck_command_passes_and_detects_a_broken_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let arch = tmp.path().join("arch.json");
    let cfg = cfekit::network::ArchConfig::new(cfekit::network::ArchVariant::CfenetFull, 64, 2).with_widths([2, 4, 4]);
    fs::write(&arch, cfg.to_json()).unwrap();
    let good = tmp.path().join("good");
    ok(&["gradcheck", "--config", s(&arch), "--batch", "1", "--out", s(&good)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(good.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);

    let bad = tmp.path().join("bad");
    let out = cfekit(&["gradcheck", "--config", s(&arch), "--batch", "1", "--corrupt-gradient", "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(bad.join("gradcheck.json").exists());
}
