use std::path::Path;
use std::process::{Command, Output};

use maskrank::io::save_tensor;
use maskrank::{LabelMap, Tensor};
use serde_json::Value;

fn maskrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskrank")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = maskrank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = maskrank(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn match_prints_pairs_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.json");
    write(&cost, r#"{"shape": [2, 2], "data": [4, 1, 2, 3]}"#);
    let v = ok_json(&["match", "--cost", s(&cost)]);
    assert_eq!(v["pairs"], serde_json::json!([[1, 0], [0, 1]]));
    assert_eq!(v["total_cost"], 3.0);

    let wide = dir.path().join("wide.mten");
    save_tensor(&Tensor::zeros(&[1, 2]), &wide).unwrap();
    let out = maskrank(&["match", "--cost", s(&wide)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("more ground truths"));
}

#[test]
fn corrupt_tensor_reports_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.mten");
    save_tensor(&Tensor::zeros(&[2, 2]), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let out = maskrank(&["match", "--cost", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("expected 46 bytes, got 41"), "{err}");
}

#[test]
fn weighted_total_loss() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("class.json"), "0.1");
    write(&dir.path().join("mask.json"), r#"{"value": 0.2}"#);
    write(&dir.path().join("rank.json"), "0.3");
    let v = ok_json(&["loss", "--kind", "total", "--inputs", s(dir.path())]);
    assert!((v["value"].as_f64().unwrap() - 1.5).abs() < 1e-12);

    let cfg = dir.path().join("weights.json");
    write(&cfg, r#"{"loss": {"weights": {"alpha": 1, "beta": 1, "gamma": 1, "lambda": 0.6, "temperature": 0.1}}}"#);
    let v = ok_json(&["loss", "--kind", "total", "--inputs", s(dir.path()), "--weights", s(&cfg)]);
    assert!((v["value"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn class_losses_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let r = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
    save_tensor(&r, dir.path().join("R.mten")).unwrap();
    write(&dir.path().join("targets.json"), "[[0, 0], [1, 1]]");
    write(&dir.path().join("labels.json"), r#"{"positives": [0], "negatives": [1]}"#);

    let ce = ok_json(&["loss", "--kind", "ce", "--inputs", s(dir.path())]);
    assert!(ce["value"].as_f64().unwrap() > 0.0);
    assert_eq!(ce["gradients"]["R"]["shape"], serde_json::json!([2, 2]));
    let bg = ok_json(&["loss", "--kind", "bg", "--inputs", s(dir.path())]);
    assert!((bg["value"].as_f64().unwrap() - 0.6 * ce["value"].as_f64().unwrap()).abs() < 1e-12);
    let rank = ok_json(&["loss", "--kind", "rank", "--inputs", s(dir.path())]);
    assert!((rank["value"].as_f64().unwrap() - (1.0 + (0.8f64 - 0.9).exp()).ln()).abs() < 1e-12);

    let bad = dir.path().join("bad.json");
    write(&bad, r#"{"loss": {"weights": {"alpha": 2, "beta": 5, "gamma": 1, "lambda": 0.6, "temperature": 0}}}"#);
    let out = maskrank(&["loss", "--kind", "ce", "--inputs", s(dir.path()), "--weights", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature must be positive"));
}

#[test]
fn mask_losses_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    save_tensor(&Tensor::filled(&[2, 2], 0.5), dir.path().join("pred.json")).unwrap();
    save_tensor(&Tensor::filled(&[2, 2], 1.0), dir.path().join("gt.json")).unwrap();
    let dice = ok_json(&["loss", "--kind", "dice", "--inputs", s(dir.path())]);
    // 1 - (2·2 + 1) / (2 + 4 + 1)
    assert!((dice["value"].as_f64().unwrap() - 2.0 / 7.0).abs() < 1e-12);
    let focal = ok_json(&["loss", "--kind", "focal", "--inputs", s(dir.path())]);
    assert!((focal["value"].as_f64().unwrap() - 0.25 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn infer_pastes_disjoint_one_hot_proposals() {
    let dir = tempfile::tempdir().unwrap();
    let text = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    // Proposal 0 carries class 2, proposal 1 class 0.
    let emb = Tensor::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
    let masks = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    save_tensor(&text, dir.path().join("T.mten")).unwrap();
    save_tensor(&emb, dir.path().join("E.mten")).unwrap();
    save_tensor(&masks, dir.path().join("M.mten")).unwrap();
    let labels = dir.path().join("classes.json");
    write(&labels, r#"{"classes": ["sky", "cloud", "tree"], "seen": [0, 2], "unseen": [1]}"#);
    let out = dir.path().join("pred.mten");
    let v = ok_json(&[
        "infer",
        "--embeddings", s(&dir.path().join("E.mten")),
        "--text", s(&dir.path().join("T.mten")),
        "--proposals", s(&dir.path().join("M.mten")),
        "--classes", s(&labels),
        "--out", s(&out),
    ]);
    assert_eq!(v["pixels_per_class"], serde_json::json!({"sky": 2, "tree": 2}));
    let map = LabelMap::from_tensor(&maskrank::io::load_tensor(&out).unwrap()).unwrap();
    assert_eq!(map.labels, vec![2, 2, 0, 0]);
    let names: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pred.classes.json")).unwrap()).unwrap();
    assert_eq!(names, ["sky", "cloud", "tree"]);
}

#[test]
fn eval_of_identical_maps_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for (name, labels) in [("a", vec![0.0, 1.0, 2.0, 2.0]), ("b", vec![1.0, 1.0, 0.0, 255.0])] {
        let t = Tensor::new(vec![2, 2], labels).unwrap();
        save_tensor(&t, pred.join(format!("{name}.mten"))).unwrap();
        save_tensor(&t, gt.join(format!("{name}.json"))).unwrap();
    }
    let seen = dir.path().join("seen.json");
    write(&seen, "[0, 1]");
    let csv = dir.path().join("iou.csv");
    let v = ok_json(&[
        "eval", "--pred", s(&pred), "--gt", s(&gt), "--seen", s(&seen), "--num-classes", "3", "--csv", s(&csv),
    ]);
    assert_eq!(v["hiou"], 1.0);
    assert_eq!(v["per_class_iou"], serde_json::json!([1.0, 1.0, 1.0]));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "class,iou\n0,1\n1,1\n2,1\n");
}

#[test]
fn pseudo_labels_per_image_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let emb_dir = dir.path().join("emb");
    std::fs::create_dir_all(&emb_dir).unwrap();
    let text = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
    save_tensor(&text, dir.path().join("T.mten")).unwrap();
    // img_b: first proposal matches unseen class 1 but its mask is empty.
    let b = Tensor::from_rows(&[[0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
    save_tensor(&b, emb_dir.join("img_b.mten")).unwrap();
    let masks = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    save_tensor(&masks, emb_dir.join("img_b.masks.mten")).unwrap();
    let a = Tensor::from_rows(&[[0.0, 0.0, 1.0, 0.0], [3.0, 0.0, 0.0, 0.0]]).unwrap();
    save_tensor(&a, emb_dir.join("img_a.json")).unwrap();

    let out = dir.path().join("labels.jsonl");
    let v = ok_json(&[
        "pseudo-label", "--embeddings", s(&emb_dir), "--text", s(&dir.path().join("T.mten")), "--out", s(&out),
    ]);
    assert_eq!(v["images"], 2);
    let lines: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["image_id"], "img_a");
    assert_eq!(lines[0]["labels"], serde_json::json!([0]));
    assert_eq!(lines[1]["image_id"], "img_b");
    assert_eq!(lines[1]["labels"], serde_json::json!([]));

    let out2 = maskrank(&[
        "pseudo-label", "--embeddings", s(&emb_dir), "--text", s(&dir.path().join("T.mten")),
        "--threshold", "1.5", "--out", s(&out),
    ]);
    assert_eq!(out2.status.code(), Some(1));
}

#[test]
fn train_toy_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(
        &cfg,
        r#"{"train": {"mode": "bg-aware+rank", "n_queries": 8, "steps": 20, "train_scenes": 6, "eval_scenes": 4, "batch_size": 3, "seed": 11}}"#,
    );
    let run = |threads: &str, tag: &str| {
        let csv = dir.path().join(format!("history-{tag}.csv"));
        let report = dir.path().join(format!("report-{tag}.json"));
        let out = Command::new(env!("CARGO_BIN_EXE_maskrank"))
            .env("MASKRANK_THREADS", threads)
            .args(["train-toy", "--config", s(&cfg), "--out", s(&csv), "--report", s(&report)])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            out.stdout,
            std::fs::read_to_string(csv).unwrap(),
            std::fs::read_to_string(report).unwrap(),
        )
    };
    let a = run("1", "a");
    let b = run("3", "b");
    assert_eq!(a, b);
    assert!(a.1.starts_with("step,total,class,mask,rank\n"));
    assert_eq!(a.1.lines().count(), 21);
    let report: Value = serde_json::from_str(&a.2).unwrap();
    assert!(report["bg-aware+rank"]["per_class_iou"].is_array());

    let out = Command::new(env!("CARGO_BIN_EXE_maskrank"))
        .env("MASKRANK_THREADS", "zero")
        .args(["train-toy", "--out", s(&dir.path().join("x.csv"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_toy_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(&cfg, r#"{"train": {"stpes": 3}}"#);
    let out = maskrank(&["train-toy", "--config", s(&cfg), "--out", s(&dir.path().join("h.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}
