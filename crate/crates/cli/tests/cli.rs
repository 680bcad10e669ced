use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = r#"{"dim": 2, "classes": 3, "n_source": 300, "n_target": 300, "mixture": [0.5, 0.5], "cluster_std": 0.5, "center_box": 4.0, "subtargets": [{"rotation_deg": 10.0, "translation": [1.0, 0.0], "scale": [1.0, 1.0], "label_offset": 0.0, "noise_std": 0.1}, {"rotation_deg": -20.0, "translation": [0.0, 1.0], "scale": [1.0, 1.0], "label_offset": 0.2, "noise_std": 0.1}]}
"#;

/// SHA-256 of `SPEC`, computed with `sha256sum`.
const SPEC_SHA256: &str = "0b53dc696600ef2e529286330a9dab7326c7c9061ec2842ae0f1525ccc514fac";

fn amean(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amean")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small networks and few iterations so each run takes well under a second.
fn experiment(dir: &TempDir, variant: &str, seeds: &[u64], extra_hyper: &str) -> std::path::PathBuf {
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, SPEC).unwrap();
    let cfg = format!(
        r#"{{
  "data": {{"spec": {spec}}},
  "train": {{
    "variant": "{variant}",
    "outer_loops": 2,
    "hyper": {{"iterations": 15, "batch_size": 32{extra_hyper}}},
    "dec": {{"pretrain_iters": 10, "max_epochs": 3}},
    "arch": {{"feature_dim": 8, "feature_hidden": [8], "trunk_dim": 8, "encoder_hidden": [16], "decoder_hidden": [16]}}
  }},
  "seeds": {seeds:?},
  "out_dir": "out"
}}"#,
        spec = SPEC.trim()
    );
    let cfg_path = dir.path().join(format!("{variant}.json"));
    fs::write(&cfg_path, cfg).unwrap();
    cfg_path
}

#[test]
fn generate_writes_data_and_manifest() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let out = dir.path().join("data.csv");
    let o = amean(&["generate", "--config", path(&spec), "--out", path(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec_sha256"], SPEC_SHA256);
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["rows"], 600);
    let first = fs::read(&out).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 601);

    let o = amean(&["generate", "--config", path(&spec), "--out", path(&out), "--seed", "3"]);
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn generate_rejects_bad_json_with_position() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, "{\"dim\": 2,\n  \"classes\": }").unwrap();
    let o = amean(&["generate", "--config", path(&spec), "--out", path(&dir.path().join("d.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2 column"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(amean(&["train"]).status.code(), Some(1));
    assert_eq!(amean(&["frobnicate"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"outer_loop": 2}}"#).unwrap();
    let o = amean(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outer_loop"));
    fs::write(&cfg, r#"{"seeds": []}"#).unwrap();
    assert_eq!(amean(&["train", "--config", path(&cfg)]).status.code(), Some(1));
    assert_eq!(amean(&["train", "--config", path(&dir.path().join("missing.json"))]).status.code(), Some(1));
}

#[test]
fn diverging_run_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = experiment(&dir, "source-only", &[0], r#", "learning_rate": 1e200"#);
    let o = amean(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn default_source_only_run_is_quick() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("so.json");
    fs::write(&cfg, r#"{"train": {"variant": "source-only"}, "out_dir": "out"}"#).unwrap();
    let start = std::time::Instant::now();
    let o = amean(&["train", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert!(dir.path().join("out/source-only/seed-0/metrics.json").exists());
}

#[test]
fn train_writes_one_report_per_seed_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let cfg = experiment(&dir, "amean", &[1, 2], "");
    let o = amean(&["train", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = |seed: u64| dir.path().join(format!("out/amean/seed-{seed}"));
    for seed in [1, 2] {
        for f in ["checkpoint.bin", "history.csv", "summary.json", "metrics.json", "partition.csv"] {
            assert!(run(seed).join(f).exists(), "seed {seed} missing {f}");
        }
    }
    let reports: Vec<_> = fs::read_dir(dir.path().join("out/amean")).unwrap().collect();
    assert_eq!(reports.len(), 2);
    let before: Vec<Vec<u8>> = ["metrics.json", "history.csv", "checkpoint.bin"].iter().map(|f| fs::read(run(1).join(f)).unwrap()).collect();

    // Same config on two workers and a narrowed seed list: identical files.
    let out2 = dir.path().join("again");
    let o = amean(&["train", "--config", path(&cfg), "--threads", "2", "--out", path(&out2)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: Vec<Vec<u8>> = ["metrics.json", "history.csv", "checkpoint.bin"].iter().map(|f| fs::read(out2.join("amean/seed-1").join(f)).unwrap()).collect();
    assert_eq!(before, again);
    let out3 = dir.path().join("single");
    assert!(amean(&["train", "--config", path(&cfg), "--seed", "1", "--out", path(&out3)]).status.success());
    assert_eq!(fs::read(out3.join("amean/seed-1/metrics.json")).unwrap(), before[0]);
    assert!(!out3.join("amean/seed-2").exists());
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = TempDir::new().unwrap();
    let cfg = experiment(&dir, "amean", &[4], "");
    assert!(amean(&["train", "--config", path(&cfg)]).status.success());
    let run = dir.path().join("out/amean/seed-4");
    let data = dir.path().join("out/data/seed-4.csv");
    let eval_dir = dir.path().join("eval");
    let o = amean(&[
        "eval", "--checkpoint", path(&run.join("checkpoint.bin")), "--dataset", path(&data), "--out", path(&eval_dir),
        "--seed", "4", "--label", "amean",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(eval_dir.join("metrics.json")).unwrap(), fs::read(run.join("metrics.json")).unwrap());
    let test_rows = fs::read_to_string(&data).unwrap().lines().filter(|l| l.starts_with("target,test,")).count();
    assert_eq!(fs::read_to_string(eval_dir.join("embeddings.csv")).unwrap().lines().count(), test_rows + 1);

    let o = amean(&["eval", "--checkpoint", path(&run.join("checkpoint.bin")), "--dataset", path(&dir.path().join("nope.csv")), "--out", path(&eval_dir)]);
    assert_eq!(o.status.code(), Some(1));

    // A dataset with an extra column does not fit the first layer.
    let wide = dir.path().join("wide.json");
    let wide_spec = SPEC
        .replace(r#""dim": 2"#, r#""dim": 3"#)
        .replace("[1.0, 1.0]", "[1.0, 1.0, 1.0]")
        .replace("[1.0, 0.0]", "[1.0, 0.0, 0.0]")
        .replace("[0.0, 1.0]", "[0.0, 1.0, 0.0]");
    fs::write(&wide, wide_spec).unwrap();
    let wide_csv = dir.path().join("wide.csv");
    assert!(amean(&["generate", "--config", path(&wide), "--out", path(&wide_csv)]).status.success());
    let o = amean(&["eval", "--checkpoint", path(&run.join("checkpoint.bin")), "--dataset", path(&wide_csv), "--out", path(&eval_dir)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("feature.0.weight"), "{}", stderr(&o));
}

#[test]
fn ablation_table_has_five_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = experiment(&dir, "amean", &[0, 1], "");
    let o = amean(&["ablate", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["source-only", "no-meta", "explicit-sub-target", "static-k-clustering", "amean"]);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("2")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
    // Adapted runs carry the gain over the same seed's source-only run.
    let so: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/source-only/seed-1/metrics.json")).unwrap()).unwrap();
    let am: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/amean/seed-1/metrics.json")).unwrap()).unwrap();
    assert_eq!(am["acc_source_only"], so["acc_btda"]);
}

#[test]
fn k_sweep_reports_each_k() {
    let dir = TempDir::new().unwrap();
    let cfg = experiment(&dir, "amean", &[0], "");
    let o = amean(&["sweep-k", "--config", path(&cfg), "--k-list", "2..4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/sweep_k.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["2", "3", "4"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/sweep_k.json")).unwrap()).unwrap();
    assert_eq!(json["data_subtargets"], 2);
    assert!((2..=4).contains(&json["best_k"].as_u64().unwrap()));
    let first = fs::read(dir.path().join("out/k-3/seed-0/history.csv")).unwrap();
    assert!(amean(&["sweep-k", "--config", path(&cfg), "--k-list", "3"]).status.success());
    assert_eq!(fs::read(dir.path().join("out/k-3/seed-0/history.csv")).unwrap(), first);

    assert_eq!(amean(&["sweep-k", "--config", path(&cfg), "--k-list", "1,2"]).status.code(), Some(1));
    assert_eq!(amean(&["sweep-k", "--config", path(&cfg), "--k-list", "4..2"]).status.code(), Some(1));
}
