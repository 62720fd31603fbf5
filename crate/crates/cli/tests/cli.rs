use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ppcl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppcl"))
        .args(args)
        .env("PPCL_OUT", root)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn tiny_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "epochs": 1,
        "batch_size": 4,
        "pool": {"size": 8, "prompt_len": 2, "k": 2},
        "backbone": {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_encoder": 1, "n_decoder": 1, "max_positions": 128},
        "warmup": {"steps": 20, "batch_size": 4, "examples_per_task": 16, "max_prefix": 4},
        "data": {"train": 8, "validation": 3, "test": 3, "seed": 4},
        "diag_queries_per_task": 3
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_artifacts_under_the_output_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({}));
    let o = ppcl(&["run", "--config", s(&cfg), "--method", "pp", "--seed", "7"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("pp_seed7");
    for f in ["config.json", "metrics_val.csv", "metrics_test.csv", "summary.json", "events.jsonl", "final.ppcl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(tmp.path().join(".warmup").read_dir().unwrap().count() == 1);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({}));
    assert_eq!(code(&ppcl(&["run", "--config", s(&cfg), "--method", "ewc"], tmp.path())), 2);
    assert_eq!(code(&ppcl(&["run", "--config", s(&cfg), "--top-k", "99"], tmp.path())), 2);
    assert_eq!(code(&ppcl(&["run", "--no-such-flag"], tmp.path())), 2);
    fs::write(tmp.path().join("bad.json"), "{").unwrap();
    assert_eq!(code(&ppcl(&["run", "--config", s(&tmp.path().join("bad.json"))], tmp.path())), 2);
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({"method": "seq_ft", "finetune_lr": 1e300}));
    let o = ppcl(&["run", "--config", s(&cfg)], tmp.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_summarizes_every_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({"method": "seq_ft"}));
    let root = tmp.path().join("sw");
    let o = ppcl(
        &["sweep", "--config", s(&cfg), "--axis", "buffer_size", "--values", "2,4", "--out", s(&root), "--jobs", "2"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(root.join("sweep_summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("2,seq_ft,true,2,0,") && rows[0].ends_with(",ok"), "{csv}");
    assert!(rows[1].starts_with("4,seq_ft,true,4,0,"), "{csv}");
}

#[test]
fn sweep_reports_failed_sub_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({"finetune_lr": 1e300}));
    let root = tmp.path().join("sw");
    let o = ppcl(
        &["sweep", "--config", s(&cfg), "--axis", "method", "--values", "pp_tf,seq_ft", "--out", s(&root)],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    let csv = fs::read_to_string(root.join("sweep_summary.csv")).unwrap();
    assert!(csv.contains("pp_tf,pp_tf,false") && csv.contains(",ok\n"), "{csv}");
    assert!(csv.contains(",exit 3\n"), "{csv}");
}

#[test]
fn diagnose_rebuilds_the_same_csvs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), serde_json::json!({}));
    let dir = tmp.path().join("r");
    assert_eq!(code(&ppcl(&["run", "--config", s(&cfg), "--method", "pp_tf", "--out", s(&dir)], tmp.path())), 0);
    let diag = dir.join("diagnostics");
    let read_all = || {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(&diag)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let original = read_all();
    let stages = original.iter().filter(|(n, _)| n.starts_with("stage_")).count();
    assert_eq!(stages, 5);
    assert!(original.iter().any(|(n, _)| n == "drift.csv"));
    fs::remove_dir_all(&diag).unwrap();
    assert_eq!(code(&ppcl(&["diagnose", s(&dir)], tmp.path())), 0);
    assert_eq!(read_all(), original);

    let plain = tmp.path().join("plain");
    assert_eq!(code(&ppcl(&["run", "--config", s(&cfg), "--method", "seq_ft", "--out", s(&plain)], tmp.path())), 0);
    assert_eq!(code(&ppcl(&["diagnose", s(&plain)], tmp.path())), 2);
}

#[test]
fn generated_jsonl_stream_runs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let o = ppcl(
        &["gen-data", "--out", s(&data), "--seed", "3", "--train", "6", "--validation", "2", "--test", "2"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let mut dirs: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 4);
    assert!(dirs[0].starts_with("0_"));
    let train = fs::read_to_string(data.join(&dirs[0]).join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 6);

    let cfg = tiny_config(tmp.path(), serde_json::json!({}));
    let tasks = format!("jsonl:{}", data.display());
    let out = tmp.path().join("j");
    let o = ppcl(
        &["run", "--config", s(&cfg), "--method", "task_specific_prompts", "--tasks", &tasks, "--out", s(&out)],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics_val.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn eval_scores_files() {
    let tmp = TempDir::new().unwrap();
    let (h, r) = (tmp.path().join("h.txt"), tmp.path().join("r.txt"));
    fs::write(&h, "a b c d e\nX y\n").unwrap();
    fs::write(&r, "a b c d e\nx y\n").unwrap();
    let o = ppcl(&["eval", "--hyps", s(&h), "--refs", s(&r), "--lowercase"], tmp.path());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "100.000000");
    let o = ppcl(&["eval", "--hyps", s(&h), "--refs", s(&r)], tmp.path());
    let v: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(v < 100.0);
    fs::write(&r, "one\n").unwrap();
    assert_eq!(code(&ppcl(&["eval", "--hyps", s(&h), "--refs", s(&r)], tmp.path())), 2);
}
