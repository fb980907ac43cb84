use std::path::Path;
use std::process::{Command, Output};

use qptlab_core::curation::CurationRecord;

fn qptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qptlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("QPTV2_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&qptlab(&["--out", s(d), "synth", "--n", "6", "--size", "40"]));
    }
    let manifest = std::fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, std::fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&manifest).lines().count(), 6);
    for entry in std::fs::read_dir(a.join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.join("images").join(&name)).unwrap(), std::fs::read(b.join("images").join(&name)).unwrap());
    }
}

#[test]
fn eval_with_identity_predictor_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&qptlab(&["--out", s(&data), "synth", "--n", "30", "--size", "32"]));
    let out = dir.path().join("eval");
    ok(&qptlab(&["--out", s(&out), "eval", "--manifest", s(&data.join("manifest.jsonl")), "--predictor", "identity"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let protocol = &report["protocol"];
    assert_eq!(protocol["splits"].as_array().unwrap().len(), 10);
    assert!((protocol["mean_srcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((protocol["mean_plcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().contains("identity (mean)"));
}

#[test]
fn curate_filters_and_writes_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&qptlab(&["--out", s(&data), "synth", "--n", "8", "--size", "48"]));
    let manifest = data.join("manifest.jsonl");
    let records = qptlab::manifest::read_manifest(&manifest).unwrap();
    let mut counts: Vec<u32> = records.iter().map(|r| r.object_count).collect();
    counts.sort();
    let threshold = counts[4];
    let want = records.iter().filter(|r| r.object_count >= threshold).count();

    let out = dir.path().join("curated");
    ok(&qptlab(&["--out", s(&out), "curate", "--manifest", s(&manifest), "--min-objects", &threshold.to_string()]));
    let kept: Vec<CurationRecord> = qptlab::manifest::read_manifest(&out.join("filtered.jsonl")).unwrap();
    assert_eq!(kept.len(), want);
    assert!(kept.iter().all(|r| r.object_count >= threshold));
    for f in ["stats.json", "input_stats.json", "effective_config.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let cfg = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(cfg.contains(&format!("min_objects = {threshold}")), "{cfg}");
}

#[test]
fn ablate_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let o = qptlab(&[
        "--out", s(&out),
        "--set", "model.patch=4",
        "--set", "data.synth_images=8",
        "--set", "data.synth_labeled=12",
        "--set", "pretrain.epochs=1",
        "--set", "finetune.epochs=1",
        "--set", "eval.n_splits=2",
        "ablate", "--grid", "mask_ratio=0.3,0.6,0.75,0.9",
    ]);
    ok(&o);
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 6, "{md}");
    for (line, v) in lines[2..].iter().zip(["0.3", "0.6", "0.75", "0.9"]) {
        assert!(line.starts_with(&format!("| {v} |")), "{line}");
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["key"], "pretrain.mask_ratio");
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(qptlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qptlab(&["--out", s(&out), "synth", "--bogus"]).status.code(), Some(2));

    let o = qptlab(&["--out", s(&out), "--set", "pretrain.mask_ratoi=0.5", "synth", "--n", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pretrain.mask_ratio"), "no suggestion in: {err}");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nheads = 4\nwidth = 3\n").unwrap();
    let o = qptlab(&["--out", s(&out), "--config", s(&cfg), "synth", "--n", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.width"));

    assert_eq!(qptlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = qptlab(&["--out", s(&dir.path().join("x")), "eval", "--checkpoint", s(&dir.path().join("missing")), "--manifest", s(&dir.path().join("nope.jsonl"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pretrain_then_finetune_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let set = [
        "--set", "data.synth_images=8",
        "--set", "data.synth_labeled=10",
        "--set", "pretrain.epochs=1",
        "--set", "finetune.epochs=1",
    ];
    let run = |sub: &[&str], out: &Path| {
        let mut args = vec!["--out", s(out)];
        args.extend_from_slice(&set);
        args.extend_from_slice(sub);
        let o = qptlab(&args);
        ok(&o);
        o
    };
    let pre = dir.path().join("pre");
    run(&["pretrain"], &pre);
    let fine = dir.path().join("fine");
    run(&["finetune", "--checkpoint", s(&pre.join("checkpoint"))], &fine);
    let eval = dir.path().join("eval");
    run(&["eval", "--checkpoint", s(&fine.join("checkpoint"))], &eval);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "checkpoint");
    assert_eq!(report["all"]["n"], 10);
    let manifest = qptlab::checkpoint::read_manifest(&fine.join("checkpoint")).unwrap();
    assert!(manifest.head_hidden.is_some());
}
