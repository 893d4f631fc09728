//! End-to-end command-line tests through the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn calig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calig"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn tiny_train_args<'a>(out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--out",
        out,
        "--seed",
        seed,
        "--num-layers",
        "1",
        "--num-heads",
        "2",
        "--hidden-dim",
        "8",
        "--vocab-size",
        "24",
        "--seq-len",
        "8",
        "--train-examples",
        "40",
        "--test-examples",
        "12",
        "--epochs",
        "1",
    ]
}

#[test]
fn train_explain_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();

    let res = calig(&tiny_train_args(&out, "3"));
    assert!(res.status.success(), "train failed: {}", String::from_utf8_lossy(&res.stderr));
    for f in ["model.ckpt", "train_log.json", "train.jsonl", "test.jsonl"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train_log.json")).unwrap())
            .unwrap();
    assert_eq!(log["run_config"]["seed"], 3);
    assert_eq!(log["run_config"]["command"], "train");

    let model = dir.path().join("model.ckpt");
    let exp_dir = dir.path().join("explain");
    let res = calig(&[
        "explain",
        "--model",
        model.to_str().unwrap(),
        "--tokens",
        "1,5,9,12,7",
        "--out",
        exp_dir.to_str().unwrap(),
        "--steps",
        "4",
    ]);
    assert!(res.status.success(), "explain failed: {}", String::from_utf8_lossy(&res.stderr));
    let attribution = exp_dir.join("attribution.json");
    let heatmap = exp_dir.join("heatmap.html");
    assert!(attribution.exists() && heatmap.exists());

    // Heatmap is self-contained: no external asset references.
    let html = fs::read_to_string(&heatmap).unwrap();
    assert!(!html.contains("http://") && !html.contains("https://") && !html.contains("src="));
    assert!(html.contains("tok5"));

    // Reruns are byte-identical.
    let first_doc = fs::read(&attribution).unwrap();
    let first_html = fs::read(&heatmap).unwrap();
    let res = calig(&[
        "explain",
        "--model",
        model.to_str().unwrap(),
        "--tokens",
        "1,5,9,12,7",
        "--out",
        exp_dir.to_str().unwrap(),
        "--steps",
        "4",
    ]);
    assert!(res.status.success());
    assert_eq!(first_doc, fs::read(&attribution).unwrap());
    assert_eq!(first_html, fs::read(&heatmap).unwrap());

    // Re-render from the saved document reproduces the same heatmap.
    let render_dir = dir.path().join("render");
    let res = calig(&[
        "render",
        "--attribution",
        attribution.to_str().unwrap(),
        "--out",
        render_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "render failed: {}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(first_html, fs::read(render_dir.join("heatmap.html")).unwrap());

    // The attribution document embeds the run config and scores.
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&attribution).unwrap()).unwrap();
    assert_eq!(doc["run_config"]["command"], "explain");
    assert_eq!(doc["result"]["token_scores"].as_array().unwrap().len(), 5);
}

#[test]
fn train_same_seed_gives_identical_checkpoints() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let o1 = d1.path().to_str().unwrap().to_string();
    let o2 = d2.path().to_str().unwrap().to_string();
    assert!(calig(&tiny_train_args(&o1, "9")).status.success());
    assert!(calig(&tiny_train_args(&o2, "9")).status.success());
    let c1 = fs::read(d1.path().join("model.ckpt")).unwrap();
    let c2 = fs::read(d2.path().join("model.ckpt")).unwrap();
    assert_eq!(c1, c2, "same seed must give bitwise-identical checkpoints");
}

#[test]
fn exit_codes_partition() {
    // Usage error (clap): unknown flag.
    let res = calig(&["train", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(2));

    // I/O error: missing model file.
    let dir = tempfile::tempdir().unwrap();
    let res = calig(&[
        "explain",
        "--model",
        "/nonexistent/model.ckpt",
        "--tokens",
        "1,2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&res.stderr));

    // Config error: explain without input.
    let res = calig(&[
        "explain",
        "--model",
        "/nonexistent/model.ckpt",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn benchmark_writes_per_seed_and_aggregate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = calig(&[
        "benchmark",
        "--out",
        out,
        "--seed",
        "5",
        "--repeats",
        "2",
        "--num-layers",
        "1",
        "--num-heads",
        "2",
        "--hidden-dim",
        "8",
        "--vocab-size",
        "24",
        "--seq-len",
        "8",
        "--train-examples",
        "30",
        "--test-examples",
        "8",
        "--epochs",
        "1",
        "--steps",
        "3",
        "--auc-examples",
        "2",
        "--method",
        "calig",
        "--method",
        "attn_last",
        "--skip-checks",
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    for f in [
        "report_seed5.json",
        "report_seed5.csv",
        "report_seed6.json",
        "report_seed6.csv",
        "aggregate.json",
        "aggregate.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(agg["seeds"].as_array().unwrap().len(), 2);
    // Aggregate rows carry n = number of seeds.
    let rows = agg["rows"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["n"] == 2));
    // One token_f1 row per (method, p): 2 methods x 7 percents.
    let f1_rows = rows.iter().filter(|r| r["metric"] == "token_f1").count();
    assert_eq!(f1_rows, 14);

    // CSV artifacts embed the run config as a comment line.
    let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(csv.starts_with("# run_config: "));

    // Undertrained models cannot pass the directional checks: rerunning
    // without --skip-checks must exit with the acceptance-failure code.
    let dir2 = tempfile::tempdir().unwrap();
    let res = calig(&[
        "benchmark",
        "--out",
        dir2.path().to_str().unwrap(),
        "--seed",
        "5",
        "--repeats",
        "1",
        "--num-layers",
        "1",
        "--num-heads",
        "2",
        "--hidden-dim",
        "8",
        "--vocab-size",
        "24",
        "--seq-len",
        "8",
        "--train-examples",
        "10",
        "--test-examples",
        "8",
        "--epochs",
        "1",
        "--steps",
        "2",
        "--auc-examples",
        "0",
    ]);
    assert_eq!(res.status.code(), Some(5), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("check "), "directional checks should print: {stdout}");
}

#[test]
fn profile_writes_grid_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let res = calig(&[
        "profile",
        "--out",
        dir.path().to_str().unwrap(),
        "--grid-layers",
        "1,2",
        "--grid-steps",
        "2,4",
        "--reps",
        "1",
        "--steps",
        "2",
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    // Header comment + column header + one row per grid point.
    assert_eq!(csv.lines().count(), 2 + 4);
    assert!(Path::new(&dir.path().join("profile.json")).exists());
}
