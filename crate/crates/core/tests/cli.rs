use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcl")).args(args).env_remove("PCL_OUT_DIR").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_tiny(dir: &Path) {
    let out = dir.to_str().unwrap();
    let o = pcl(&[
        "gen-data", "--out", out, "--seed", "5", "--train-size", "80", "--dev-size", "24", "--test-size", "16",
        "--s1-len", "4", "--s2-len", "6", "--vocab-size", "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tiny_train_args<'a>(data: &'a str, out: &'a str) -> Vec<String> {
    [
        "train", "--data.train", &format!("{data}/train.jsonl"), "--data.dev", &format!("{data}/dev.jsonl"),
        "--data.test", &format!("{data}/test_public.jsonl"), "--data.tokenize", "whitespace", "--train.epochs", "2",
        "--train.batch_size", "8", "--encoder.dim", "8", "--encoder.heads", "2", "--encoder.ffn_dim", "16",
        "--encoder.max_len", "16", "--out", out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    pcl(&refs)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = pcl(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_value_names_the_field() {
    let o = pcl(&["train", "--loss.epsilon=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.epsilon"), "{}", stderr(&o));
}

#[test]
fn invalid_table_override_is_rejected() {
    let o = pcl(&["train", "--loss.table", "t2p0=C1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.table"), "{}", stderr(&o));
}

#[test]
fn missing_data_file_is_reported() {
    let o = pcl(&["train", "--data.train", "/nonexistent/train.jsonl", "--data.dev", "/nonexistent/dev.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));
}

#[test]
fn stats_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let path = dir.path().join("train.jsonl");
    let o = pcl(&["stats", "--data", path.to_str().unwrap(), "--tokenize", "whitespace"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("label counts") && out.contains("20/50/10"), "{out}");
    let json: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(json["examples"], 80);
}

#[test]
fn grad_check_passes() {
    let o = pcl(&["grad-check", "--configs", "3", "--coords", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn train_then_eval_and_rerun_from_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let data = dir.path().to_str().unwrap();
    let first = dir.path().join("run1");
    let o = run(&tiny_train_args(data, first.to_str().unwrap()));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "vocab.txt", "history.jsonl", "steps.jsonl", "metrics.json", "confusion.txt", "effective.cfg"] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    let steps = fs::read_to_string(first.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 2 * 10);

    let ckpt = first.join("model.ckpt");
    let test = dir.path().join("test_public.jsonl");
    let o = pcl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap(), "--tokenize", "whitespace"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(first.join("metrics.json")).unwrap()).unwrap();
    let line = format!("macro-F1 {:.2}", metrics["macro_f1"].as_f64().unwrap());
    assert!(stdout(&o).contains(&line), "{} vs {line}", stdout(&o));

    let second = dir.path().join("run2");
    let cfg = first.join("effective.cfg");
    let o = pcl(&["train", "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "history.jsonl", "steps.jsonl", "metrics.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs on rerun");
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.txt");
    fs::write(&docs, "a b c\nd e f\ng h\n\ni j k\nl m\n").unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_pcl"))
        .args(["mask-instances", "--docs", docs.to_str().unwrap(), "--epochs", "2", "--data.tokenize", "whitespace"])
        .env("PCL_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["instances.epoch0.jsonl", "instances.epoch1.jsonl", "vocab.txt", "effective.cfg"] {
        assert!(target.join(f).is_file(), "missing {f}");
    }
    let first = fs::read_to_string(target.join("instances.epoch0.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["kind"], "mlm");
}

#[test]
fn flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.txt");
    fs::write(&docs, "a b\nc d\n").unwrap();
    let env_dir = dir.path().join("env");
    let flag_dir = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_pcl"))
        .args(["mask-instances", "--docs", docs.to_str().unwrap(), "--out", flag_dir.to_str().unwrap()])
        .env("PCL_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(flag_dir.join("instances.epoch0.jsonl").is_file());
    assert!(!env_dir.exists());
}
