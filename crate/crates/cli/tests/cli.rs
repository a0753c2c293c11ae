use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sparsekp");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A dataset and config small enough to train in seconds.
fn tiny_setup(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"
dataset = "data"
out = "out"
seeds = [0]

[scene]
height = 24
width = 24
instances_mean = 4.0
instances_range = [2, 6]
texture_seed_groups = 6

[split]
train = 8
val = 3
test = 3

[model]
channels = [3, 4, 1]

[train]
max_epochs = 2
lr = 0.05
"#,
    )
    .unwrap();
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn gradcheck_lists_every_row_and_exit_code_matches_flags() {
    let o = run(&["gradcheck", "--trials", "200"]);
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert_eq!(text.lines().filter(|l| l.starts_with("ablation")).count(), 14);
    assert_eq!(text.lines().filter(|l| l.starts_with("variant")).count(), 6);
    let flagged = text.lines().any(|l| l.ends_with("FAIL"));
    assert_eq!(o.status.code(), Some(if flagged { 2 } else { 0 }), "{text}");
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    let o = run(&["gradcheck", "--trials", "50", "--corrupt-grad", "1.001"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gradient check above"));
}

#[test]
fn unknown_ablation_row_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["ablate", "--rows", "default,lambda7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("lambda7") && err.contains("only_pos_hill"), "{err}");
    assert!(!out.exists());
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[decode]\ndefault_threshold = 1.5\n").unwrap();
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!data.exists());

    fs::write(&cfg, "[train]\nlr = 0.0\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "dataset = \"nowhere\"\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["benchmark", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("data");
    let o = run(&["gen-data", "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_eval_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let out = dir.path().join("train");
    let o = run(&["train", "--config", cfg_s, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "train_log.csv", "train_timing.txt", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("best.ckpt");

    let recall_at = |t: f64, k: usize| {
        let c = dir.path().join(format!("eval_{t}_{k}.toml"));
        let base = fs::read_to_string(&cfg).unwrap();
        fs::write(&c, format!("{base}\n[decode]\ndefault_threshold = {t}\nk = {k}\n")).unwrap();
        let eval_out = dir.path().join(format!("eval_{t}_{k}"));
        let o = run(&[
            "eval", "--config", c.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
            "--split", "val", "--out", eval_out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
        let per_image_max = json["per_image"].as_array().unwrap().iter().map(|m| m["predicted"].as_u64().unwrap()).max().unwrap();
        (json["localization"]["recall"].as_f64().unwrap(), per_image_max)
    };
    let (low_t, _) = recall_at(0.3, 30);
    let (high_t, _) = recall_at(0.9, 30);
    assert!(high_t <= low_t);
    let (_, most) = recall_at(0.0, 1);
    assert!(most <= 1);
}

#[test]
fn benchmark_rows_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let out = dir.path().join("bench");
    let o = run(&[
        "benchmark", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--losses", "MSE,Hill", "--seeds", "0,1", "--threads", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("benchmark.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "loss,seed,locP,locR,locF1,mlP,mlR,mlF1");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[5].starts_with("MSE,median,") && lines[6].starts_with("Hill,median,"));
    let svg = fs::read_to_string(out.join("benchmark.svg")).unwrap();
    fs::remove_file(out.join("benchmark.svg")).unwrap();
    let o = run(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("benchmark.svg")).unwrap(), svg);
    assert!(String::from_utf8_lossy(&o.stdout).contains("median"));
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
