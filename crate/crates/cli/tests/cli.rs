use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use daem_core::dataset::{FoldPlan, Label};

fn daem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daem"))
        .args(args)
        .env_remove("DAEM_DATA_DIR")
        .output()
        .expect("spawn daem")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = daem(args);
    assert!(
        out.status.success(),
        "daem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_indexes_and_writes_thumbnails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--patients", "4", "--seed", "3"]);
    for e in fs::read_dir(&data).unwrap() {
        fs::remove_file(e.unwrap().path().join("thumbnail.png")).unwrap();
    }
    let v = ok(&["ingest", s(&data)]);
    assert_eq!(v["slides"], 4);
    assert_eq!(v["thumbnails_written"], 4);
    let index: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 4);
    assert_eq!(ok(&["ingest", s(&data)])["thumbnails_written"], 0);
}

#[test]
fn fold_plans_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--patients", "10"]);
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    ok(&["fold", "--data", s(&data), "--seed", "7", "--out", s(&a)]);
    ok(&["fold", "--data", s(&data), "--seed", "7", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let plan: FoldPlan = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(plan.assignments.len(), 10);
}

#[test]
fn exit_codes_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = daem(&["predict", "--ckpt", "/no/such.ckpt", "--bag", "/no/such/bag"]);
    assert_eq!(missing.status.code(), Some(3));

    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--patients", "2"]);
    let slide = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let manifest = slide.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"mpp\": 0.5", "\"mpp\": -1.0", 1)).unwrap();
    let bad = daem(&["ingest", s(&data)]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("manifest.json") && msg.contains("mpp"), "{msg}");

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"batch_size": 4}"#).unwrap();
    let plan = tmp.path().join("plan.json");
    let bad_cfg = daem(&["train", "--data", s(&data), "--plan", s(&plan), "--fold", "0", "--config", s(&cfg), "--out", "x"]);
    assert_eq!(bad_cfg.status.code(), Some(2));
}

#[test]
fn train_predict_eval_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--patients", "10", "--seed", "1"]);
    let plan_path = tmp.path().join("plan.json");
    ok(&["fold", "--data", s(&data), "--seed", "7", "--folds", "2", "--out", s(&plan_path)]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 40, "eval_train": false, "seed": 5}"#).unwrap();
    let ckpt = tmp.path().join("fold0.ckpt");
    ok(&[
        "train", "--data", s(&data), "--plan", s(&plan_path), "--fold", "0", "--config", s(&cfg), "--out", s(&ckpt),
    ]);

    // Training slides are fitted: the planted label comes back.
    let plan: FoldPlan = serde_json::from_slice(&fs::read(&plan_path).unwrap()).unwrap();
    for id in plan.training_ids(0) {
        let bag = data.join(&id);
        let truth = daem_core::dataset::load_bag(&bag).unwrap().label;
        let v = ok(&["predict", "--ckpt", s(&ckpt), "--bag", s(&bag)]);
        let got: Label = serde_json::from_value(v["label"].clone()).unwrap();
        assert_eq!(got, truth, "{id}: p = {}", v["probability"]);
    }

    let report = ok(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "train", "--plan", s(&plan_path), "--fold", "0",
    ]);
    assert_eq!(report["accuracy"], 1.0);

    // A plan whose second fold holds no slides.
    let mut lopsided = plan.clone();
    lopsided.assignments.values_mut().for_each(|f| *f = 0);
    let lop_path = tmp.path().join("lopsided.json");
    fs::write(&lop_path, serde_json::to_string(&lopsided).unwrap()).unwrap();
    let empty = daem(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "val", "--plan", s(&lop_path), "--fold", "1",
    ]);
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("val split is empty"));

    let png = tmp.path().join("h.png");
    let bag = data.join(plan.validation_ids(0)[0].as_str());
    ok(&["heatmap", "--ckpt", s(&ckpt), "--bag", s(&bag), "--scale", "10x", "--out", s(&png)]);
    let first = fs::read(&png).unwrap();
    ok(&["heatmap", "--ckpt", s(&ckpt), "--bag", s(&bag), "--scale", "10x", "--out", s(&png)]);
    assert_eq!(first, fs::read(&png).unwrap());
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("h.png.json")).unwrap()).unwrap();
    assert_eq!(sidecar["scale"], "10x");
    let scores: Vec<f64> = sidecar["map"]["patches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["score"].as_f64().unwrap())
        .collect();
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!(scores.contains(&0.0) && scores.contains(&1.0));

    let corrupt = tmp.path().join("corrupt.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(daem(&["predict", "--ckpt", s(&corrupt), "--bag", s(&bag)]).status.code(), Some(2));
}

#[test]
fn tme_table_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--patients", "8", "--seed", "2"]);
    let (csv, rep) = (tmp.path().join("tme.csv"), tmp.path().join("tme.json"));
    ok(&["tme", "--cohort", s(&data), "--out", s(&csv), "--report", s(&rep)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().next().unwrap().contains(",str,itr,mvd,svr,"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(report["tests"].as_array().unwrap().len(), 16);
}
