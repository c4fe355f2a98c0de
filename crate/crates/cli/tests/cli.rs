use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn diffaug(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffaug"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DIFFAUG_WORK_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str], cwd: &Path) -> String {
    let out = diffaug(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

/// Turn a real toy manifest into a "generated" one pointing at the same images.
fn as_generated(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let mut lines = text.lines();
    let mut out = vec![lines
        .next()
        .unwrap()
        .replace("\"make-toy\"", "\"generate\"")];
    for line in lines {
        let mut r: Value = serde_json::from_str(line).unwrap();
        r["source"] = json!("synthetic");
        r["provenance"] = json!({"generator_run_id": "toy"});
        out.push(r.to_string());
    }
    fs::write(dst, out.join("\n") + "\n").unwrap();
}

fn record_ids(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["record_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect()
}

fn train_config() -> Value {
    json!({"epochs": 30, "patience": 10, "image_size": 16, "architectures": ["cnn-compact"]})
}

#[test]
fn staged_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "make-toy",
            "--out",
            "real",
            "--per-class",
            "20",
            "--size",
            "16",
            "--seed",
            "1",
            "--prefix",
            "real",
        ],
        d,
    );
    ok(
        &[
            "make-toy",
            "--out",
            "test",
            "--per-class",
            "4",
            "--size",
            "16",
            "--seed",
            "2",
            "--prefix",
            "test",
        ],
        d,
    );
    ok(
        &[
            "make-toy",
            "--out",
            "syn",
            "--per-class",
            "10",
            "--size",
            "16",
            "--seed",
            "3",
            "--prefix",
            "syn",
        ],
        d,
    );
    assert_eq!(line_count(&d.join("real/manifest.jsonl")), 1 + 120);

    write_json(
        &d.join("gen.json"),
        &json!({
            "schedule": {"steps": 20, "beta_start": 0.001, "beta_end": 0.2},
            "denoiser": {"height": 16, "width": 16, "hidden": 32, "blocks": 1, "embed_dim": 8},
            "train": {"seed": 0, "steps": 20, "lr": 0.001, "batch_size": 16}
        }),
    );
    ok(
        &[
            "train-generator",
            "--train",
            "real/manifest.jsonl",
            "--config",
            "gen.json",
            "--out",
            "gen.bin",
        ],
        d,
    );
    write_json(
        &d.join("emb.json"),
        &json!({"seed": 0, "steps": 10, "lr": 0.01, "batch_size": 8}),
    );
    ok(
        &[
            "train-embeddings",
            "--checkpoint",
            "gen.bin",
            "--train",
            "real/manifest.jsonl",
            "--config",
            "emb.json",
            "--out",
            "emb.bin",
        ],
        d,
    );
    let counts: Value = ["melanoma", "lentigo"]
        .iter()
        .map(|c| (c.to_string(), json!(3)))
        .collect();
    write_json(
        &d.join("run.json"),
        &json!({"run_id": "g1", "seed": 5, "per_class_counts": counts, "sampler_steps": 20, "out_dir": "gen"}),
    );
    ok(
        &[
            "generate",
            "--checkpoint",
            "emb.bin",
            "--config",
            "run.json",
        ],
        d,
    );
    assert_eq!(line_count(&d.join("gen/g1.jsonl")), 1 + 6);

    write_json(&d.join("train.json"), &train_config());
    ok(
        &[
            "train",
            "--kind",
            "domain",
            "--scenario",
            "real/manifest.jsonl",
            "--config",
            "train.json",
            "--name",
            "domain",
            "--out",
            "filters",
        ],
        d,
    );
    ok(
        &[
            "train",
            "--scenario",
            "real/manifest.jsonl",
            "--config",
            "train.json",
            "--name",
            "ensemble",
            "--out",
            "filters",
        ],
        d,
    );

    as_generated(
        &d.join("syn/manifest.jsonl"),
        &d.join("syn/generated.jsonl"),
    );
    ok(
        &[
            "filter-domain",
            "--input",
            "syn/generated.jsonl",
            "--scorer",
            "filters/domain.bin",
            "--threshold",
            "0",
            "--out",
            "d.jsonl",
        ],
        d,
    );
    assert_eq!(line_count(&d.join("d.jsonl")), 1 + 60);
    assert_eq!(line_count(&d.join("d.decisions.jsonl")), 60);
    ok(
        &[
            "filter-label",
            "--input",
            "d.jsonl",
            "--ensemble",
            "filters/ensemble.bin",
            "--out",
            "l.jsonl",
            "--decisions",
            "l.dec.jsonl",
        ],
        d,
    );
    assert_eq!(line_count(&d.join("l.dec.jsonl")), 60);

    ok(
        &[
            "augment",
            "--input",
            "syn/generated.jsonl",
            "--scorer",
            "filters/domain.bin",
            "--ensemble",
            "filters/ensemble.bin",
            "--threshold",
            "0",
            "--out",
            "curated",
        ],
        d,
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(d.join("curated/report.json")).unwrap()).unwrap();
    assert_eq!(report["input_total"], 60);
    assert_eq!(report["domain_rate"], 1.0);
    // Both routes through the filters agree.
    assert_eq!(
        record_ids(&d.join("curated/manifest.jsonl")),
        record_ids(&d.join("l.jsonl"))
    );

    ok(
        &[
            "scenario",
            "--real",
            "real/manifest.jsonl",
            "--synthetic",
            "curated/manifest.jsonl",
            "--base-count",
            "6",
            "--seed",
            "9",
            "--out",
            "scen",
        ],
        d,
    );
    for (name, n) in [
        ("real-small", 18),
        ("real", 36),
        ("hybrid", 36),
        ("synthetic", 36),
    ] {
        assert_eq!(
            line_count(&d.join(format!("scen/{name}.jsonl"))),
            1 + n,
            "{name}"
        );
    }
    for name in ["real-small", "synthetic"] {
        ok(
            &[
                "train",
                "--scenario",
                &format!("scen/{name}.jsonl"),
                "--config",
                "train.json",
                "--out",
                "ens",
            ],
            d,
        );
    }
    let shown = ok(
        &[
            "evaluate",
            "--ensembles",
            "ens",
            "--test",
            "test/manifest.jsonl",
            "--out",
            "eval",
            "--ks",
            "1,3,6",
        ],
        d,
    );
    assert!(shown.starts_with("dataset"));
    let csv = fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("real,synthetic,top1,top3,top6\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",100.00")), "{csv}");
    assert_eq!(
        ok(
            &["report", "--input", "eval/report.json", "--format", "csv"],
            d
        ),
        csv
    );
    let json_out: Value = serde_json::from_str(&ok(
        &["report", "--input", "eval/report.json", "--format", "json"],
        d,
    ))
    .unwrap();
    assert_eq!(json_out["rows"].as_array().unwrap().len(), 2);
    assert!(d.join("eval/scores/synthetic.csv").is_file());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(diffaug(&["make-toy", "--bogus"], d).status.code(), Some(2));

    let missing = diffaug(
        &[
            "filter-label",
            "--input",
            "nope.jsonl",
            "--ensemble",
            "e.bin",
            "--out",
            "o.jsonl",
        ],
        d,
    );
    assert_eq!(missing.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.jsonl"));

    write_json(
        &d.join("exp.json"),
        &json!({"real_manifest": "absent/real.jsonl", "test_manifest": "absent/test.jsonl"}),
    );
    let out = diffaug(
        &["reproduce-toy", "--config", "exp.json", "--work-dir", "w"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent/real.jsonl"));

    write_json(&d.join("typo.json"), &json!({"sede": 3}));
    let out = diffaug(
        &["reproduce-toy", "--config", "typo.json", "--work-dir", "w"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let out = diffaug(&["reproduce-toy"], d);
    assert_eq!(out.status.code(), Some(2));

    ok(
        &["make-toy", "--out", "t", "--per-class", "1", "--size", "4"],
        d,
    );
    let text = fs::read_to_string(d.join("t/manifest.jsonl")).unwrap();
    let dup = text.lines().nth(1).unwrap().to_string();
    fs::write(d.join("t/dup.jsonl"), format!("{text}{dup}\n")).unwrap();
    let out = diffaug(
        &[
            "scenario",
            "--real",
            "t/dup.jsonl",
            "--synthetic",
            "t/dup.jsonl",
            "--out",
            "s",
        ],
        d,
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(
        &d.join("small.json"),
        &json!({
            "seed": 3,
            "toy": {"real_per_class": 30, "test_per_class": 5, "image_size": 16},
            "generator": {"train": {"seed": 0, "steps": 300, "lr": 0.001, "batch_size": 64}, "per_class": 24},
            "scenarios": {"base_count": 10},
            "train": {"epochs": 8, "image_size": 16}
        }),
    );
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_diffaug"))
            .args(["reproduce-toy", "--config", "small.json"])
            .current_dir(d)
            .env("DIFFAUG_WORK_DIR", d.join("work"))
            .env("RUST_LOG", "info")
            .output()
            .unwrap()
    };
    let first = run();
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let report = fs::read(d.join("work/eval/report.json")).unwrap();
    let second = run();
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(fs::read(d.join("work/eval/report.json")).unwrap(), report);
    let log = String::from_utf8_lossy(&second.stderr);
    let line = log
        .lines()
        .find(|l| l.contains(" stages, "))
        .expect("summary line");
    let nums: Vec<usize> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter_map(|s| s.parse().ok())
        .collect();
    assert_eq!(nums[0], nums[1], "{line}");
}
