use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmf")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
d_llm = 16
n_layers = 1
n_heads = 2
pretrain_steps = 60
steps = 300
batch = 2
ablation_seeds = [0]
";

fn gen(dir: &Path, seed: &str) {
    ok(&tmf(&["gen-data", "--seed", seed, "--items", "50", "--users", "200", "--categories", "5", "--out", p(dir)]));
}

#[test]
fn gen_data_is_byte_identical_for_equal_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen(&a, "4");
    gen(&b, "4");
    gen(&c, "5");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn missing_checkpoint_fails_with_a_structured_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "0");
    let ckpt = tmp.path().join("nowhere");
    let out = tmf(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("nowhere"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "0");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "stepz = 4\n").unwrap();
    let out = tmf(&["pretrain", "--data", p(&data), "--config", p(&cfg), "--out", p(&tmp.path().join("m"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let base = tmp.path().join("base");
    let full = tmp.path().join("full");
    let report = tmp.path().join("report");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    gen(&data, "1");
    ok(&tmf(&["pretrain", "--data", p(&data), "--config", p(&cfg), "--out", p(&base)]));
    assert!(base.join("manifest.json").exists() && base.join("weights.bin").exists());
    ok(&tmf(&["train", "--data", p(&data), "--base", p(&base), "--config", p(&cfg), "--rung", "full", "--out", p(&full)]));
    let log = fs::read_to_string(full.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 301);

    let before = fs::read(full.join("weights.bin")).unwrap();
    let out = tmf(&["eval", "--ckpt", p(&full), "--data", p(&data), "--report", p(&report)]);
    ok(&out);
    assert_eq!(before, fs::read(full.join("weights.bin")).unwrap(), "eval must not touch the checkpoint");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    let hit = r["hitrate_at_1"].as_f64().unwrap();
    let valid = r["valid_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hit) && hit <= valid);
    assert_eq!(r["n_instances"], 20);
    assert!(r["data_hashes"].is_object() && r["seeds"].is_object());
    let lines = fs::read_to_string(report.join("instances.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);

    // a second eval with the same flags rewrites identical bytes
    let first = fs::read(report.join("report.json")).unwrap();
    let first_lines = fs::read(report.join("instances.jsonl")).unwrap();
    ok(&tmf(&["eval", "--ckpt", p(&full), "--data", p(&data), "--report", p(&report)]));
    assert_eq!(first, fs::read(report.join("report.json")).unwrap());
    assert_eq!(first_lines, fs::read(report.join("instances.jsonl")).unwrap());
}

#[test]
fn ablate_writes_one_row_per_rung() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY.replace("steps = 300", "steps = 40").replace("pretrain_steps = 60", "pretrain_steps = 20")).unwrap();
    gen(&data, "2");
    let report = tmp.path().join("ablation");
    let out = tmf(&["ablate", "--data", p(&data), "--config", p(&cfg), "--report", p(&report)]);
    ok(&out);
    let csv = fs::read_to_string(report.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "Model,Seed,HitRate@1,ValidRatio");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("TMF (Text Only),0,"));
    assert!(rows[4].starts_with("+ CMA layers,0,"));
}
