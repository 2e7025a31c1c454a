//! End-to-end runs of the `blockffn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blockffn::train::TrainConfig;

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn blockffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockffn")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> serde_json::Value {
    let out = blockffn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// `configs/toy.toml` shortened to `steps` and written into `dir`.
fn short_config(dir: &Path, steps: usize) -> PathBuf {
    let mut config = TrainConfig::load(&repo("configs/toy.toml")).unwrap();
    config.data.steps = steps;
    config.data.checkpoint_every = 0;
    config.data.log_every = 5;
    let path = dir.join("short.toml");
    std::fs::write(&path, config.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["configs/toy.toml", "configs/ablation.toml"] {
        TrainConfig::load(&repo(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let bench = std::fs::read_to_string(repo("configs/bench.toml")).unwrap();
    toml::from_str::<blockffn::kernel::BenchConfig>(&bench).unwrap();
}

#[test]
fn train_eval_report_decode() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 20);
    let run = dir.path().join("run");
    let last = ok_json(&["train", "--config", s(&config), "--out", s(&run)]);
    assert_eq!(last["step"], 20);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,L_lm,L_al,L_cs,lambda_cs,tls,cls8,reuse\n"));
    assert_eq!(metrics.lines().count(), 5);
    let ckpt = run.join("final.bffn");

    let eval = ok_json(&["eval", "--ckpt", s(&ckpt)]);
    let ppl = eval["ppl"].as_f64().unwrap();
    assert!(ppl > 1.0 && ppl < 256.0, "{ppl}");

    let report_dir = dir.path().join("report");
    let mean = ok_json(&["report", "--ckpt", s(&ckpt), "--out", s(&report_dir)]);
    assert!(mean["tls"].as_f64().unwrap() >= 0.0);
    for f in ["cls_curve.csv", "allocation.csv", "magnitude.csv", "sparsity.json"] {
        assert!(report_dir.join(f).exists(), "{f}");
    }

    for policy in ["self_greedy", "ngram", "random"] {
        let out = ok_json(&[
            "spec-decode",
            "--ckpt",
            s(&ckpt),
            "--prompt",
            "the cat",
            "--policy",
            policy,
            "--n",
            "3",
            "--max-tokens",
            "12",
        ]);
        assert_eq!(out["matches_greedy"], true, "{policy}");
        assert_eq!(out["summary"]["tokens_generated"], 12);
    }
}

#[test]
fn bench_kernel_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let shape = dir.path().join("bench.toml");
    std::fs::write(&shape, "n = 8\nd_h = 16\nd_e = 4\nn_experts = 8\nwarmup = 0\nreps = 1\nmin_millis = 0\nseed = 1\n")
        .unwrap();
    let csv = dir.path().join("bench.csv");
    let out = blockffn(&["bench-kernel", "--config", s(&shape), "--densities", "0.25,1.0", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("density,n,d_h,d_e,N_e,sparse_ns,dense_ns,bytes_ratio"));
    assert!(lines.next().unwrap().starts_with("0.25,8,16,4,8,"));
    assert!(lines.next().unwrap().ends_with(",1.0"));
}

#[test]
fn ablate_writes_one_directory_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 6);
    let out_dir = dir.path().join("abl");
    let rows = ok_json(&["ablate", "--matrix", "null,l1@0.01", "--config", s(&config), "--out", s(&out_dir)]);
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out_dir.join("null/metrics.csv").exists());
    assert!(out_dir.join("l1/final.bffn").exists());
    assert!(out_dir.join("ablation.csv").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = blockffn(&["eval", "--ckpt", "/nonexistent.bffn"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[model]\nvocab_size = 0\n").unwrap();
    assert!(!blockffn(&["train", "--config", s(&bad)]).status.success());
    assert!(!blockffn(&["ablate", "--matrix", "nope", "--config", s(&repo("configs/toy.toml"))]).status.success());
}
