use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "gen.num_train=12",
    "gen.num_val=4",
    "pretrain.schedule.epochs=1",
    "pretrain.crops_per_class=2",
    "pretrain.roi_scenes=4",
    "train.schedule.epochs=1",
    "train.schedule.batch_size=4",
];

fn ovdet(out: &Path, sets: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ovdet"));
    cmd.arg("--out").arg(out).arg("--seed").arg("3");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("spawn ovdet")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Ground-truth annotations rewritten as a COCO results file.
fn gt_results(annotations: &Path, results: &Path) {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(annotations).unwrap()).unwrap();
    let res: Vec<serde_json::Value> = v["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| serde_json::json!({"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}))
        .collect();
    fs::write(results, serde_json::to_string(&res).unwrap()).unwrap();
}

#[test]
fn gen_then_eval_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&ovdet(out, TINY, &["gen"]));
    assert!(out.join("config.toml").exists());
    let res = out.join("gt.json");
    gt_results(&out.join("data/val.json"), &res);
    let o = ovdet(out, TINY, &["eval", "--results", res.to_str().unwrap()]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mAP50 all 1.0000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["map50_all"].as_f64(), Some(1.0));
}

#[test]
fn bench_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let sets = [
        "bench.warmup=0",
        "bench.iterations=2",
        "bench.min_iterations=1",
        "bench.k_values=[3, 7]",
        "bench.roi_counts=[4]",
    ];
    ok(&ovdet(dir.path(), &sets, &["bench"]));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut ks: Vec<&str> = csv
        .lines()
        .filter(|l| l.starts_with("decode_scaling,"))
        .map(|l| l.split(',').nth(3).unwrap())
        .collect();
    ks.dedup();
    assert_eq!(ks, ["3", "7"], "{csv}");
    assert!(dir.path().join("bench.json").exists());
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for step in ["gen", "pretrain", "train", "detect"] {
        ok(&ovdet(out, TINY, &[step]));
    }
    for f in [
        "clip.json",
        "detector.json",
        "loss.csv",
        "pretrain_log.csv",
        "results.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let o = ovdet(out, TINY, &["eval"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP50"));

    let png = fs::read_dir(out.join("data/images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    ok(&ovdet(out, TINY, &["detect", png.to_str().unwrap()]));
}

#[test]
fn failures_exit_nonzero_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let bad_key = ovdet(out, &["encoder.nonsense=1"], &["gen"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = ovdet(out, &["gen.image_size=0"], &["gen"]);
    assert_eq!(bad_value.status.code(), Some(2));

    ok(&ovdet(out, TINY, &["gen"]));
    let missing = ovdet(out, TINY, &["train"]);
    assert!(!missing.status.success());
    assert_ne!(missing.status.code(), Some(0));

    fs::write(
        out.join("clip.json"),
        "{\"version\": 99, \"kind\": \"clip\"}",
    )
    .unwrap();
    let stale = ovdet(out, TINY, &["train"]);
    assert_eq!(stale.status.code(), Some(4));
}
