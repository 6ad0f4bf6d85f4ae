use std::fs;
use std::process::{Command, Output};

fn protospsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protospsa"))
        .args(args)
        .env_remove("PROTOSPSA_DATA_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(protospsa(&["--help"]).status.code(), Some(0));
    assert_eq!(protospsa(&["--version"]).status.code(), Some(0));
    let unknown = protospsa(&["train", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(protospsa(&["eval"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_a_fresh_seed() {
    let out = protospsa(&["gradcheck", "--seed", "17"]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    let last = text.lines().last().unwrap();
    let value: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-3, "{last}");
}

#[test]
fn spsa_bench_reports_the_ratio() {
    let out = protospsa(&["spsa-bench", "--seeds", "5", "--steps", "500"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("ratio n=500 / n=10"));
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let train = protospsa(&[
        "train",
        "--mode",
        "multitask_fixed(random)",
        "--m",
        "2",
        "--epochs",
        "2",
        "--episodes-per-epoch",
        "4",
        "--channels",
        "16",
        "--queries",
        "2",
        "--val-episodes",
        "0",
        "--test-episodes",
        "30",
        "--quiet",
        "--out",
        run_s,
    ]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["config.json", "config.sha256", "runlog.csv", "weights.csv", "timing.csv", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("runlog.csv")).unwrap().lines().count(), 3);

    let metrics = dir.path().join("metrics.csv");
    let eval = protospsa(&[
        "eval",
        "--checkpoint",
        run_s,
        "--episodes",
        "40",
        "--metrics",
        metrics.to_str().unwrap(),
        "--label",
        "random-m2",
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("1-shot 5-way between"));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("random-m2,1,5,between,5,40,"));

    let inspect = protospsa(&["inspect", run_s]);
    assert_eq!(inspect.status.code(), Some(0));
    let text = stdout(&inspect);
    assert!(text.contains("train.epochs_done = 2"), "{text}");
    assert!(text.contains("block0.conv.weight"));

    // the last epoch is already done, so resuming changes nothing
    let before = fs::read(run.join("checkpoint.bin")).unwrap();
    let resumed = protospsa(&[
        "train",
        "--mode",
        "multitask_fixed(random)",
        "--m",
        "2",
        "--epochs",
        "2",
        "--episodes-per-epoch",
        "4",
        "--channels",
        "16",
        "--queries",
        "2",
        "--val-episodes",
        "0",
        "--test-episodes",
        "0",
        "--quiet",
        "--resume",
        "--out",
        run_s,
    ]);
    assert_eq!(resumed.status.code(), Some(0), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), before);
}

#[test]
fn missing_dataset_root_is_a_runtime_error() {
    let out = protospsa(&["train", "--data-root", "/nonexistent/omniglot", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/omniglot"));
}
