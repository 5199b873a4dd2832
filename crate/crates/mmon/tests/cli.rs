use mmon::dataset::PANELS_FILE;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmon")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_then_oracle_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mmon(&["gen", "--config", "L-R", "--n", "20", "--seed", "3", "--size", "40", "--out", path(&data)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let o = mmon(&["oracle", "--data", path(&data)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("accuracy 1.0000"));
    assert!(stdout(&o).contains("ambiguous_ties 0"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(mmon(&["gen", "--config", "hexagon", "--n", "2", "--out", path(&out)]).status.code(), Some(1));
    assert_eq!(mmon(&["gen", "--config", "center", "--n", "2", "--size", "33", "--out", path(&out)]).status.code(), Some(1));
    assert_eq!(mmon(&["gen", "--n", "2"]).status.code(), Some(1));
    assert_eq!(mmon(&["oracle", "--data", path(&dir.path().join("missing"))]).status.code(), Some(1));
    assert_eq!(mmon(&["holdout", "--rule", "symmetry", "--out", path(&out)]).status.code(), Some(1));
    assert_eq!(mmon(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupted_magic_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mmon(&["gen", "--config", "center", "--n", "3", "--out", path(&data)]).status.success());
    let panels = data.join(PANELS_FILE);
    let mut bytes = fs::read(&panels).unwrap();
    bytes[..4].copy_from_slice(b"JUNK");
    fs::write(&panels, bytes).unwrap();
    let o = mmon(&["oracle", "--data", path(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(mmon(&["gen", "--config", "center", "--n", "10", "--seed", "1", "--out", path(&data)]).status.success());
    let o = mmon(&[
        "train", "--data", path(&data), "--mode", "meta", "--lambda", "0.01", "--mu", "0.1", "--lr", "0.001", "--batch",
        "4", "--epochs", "1", "--seed", "2", "--out", path(&run),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.mmn", "train_config.json", "log.jsonl", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 1);
    let o = mmon(&["eval", "--model", path(&run.join("model.mmn")), "--data", path(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics["mode"], "meta");
    assert_eq!(metrics["per_config"][0]["count"], 10);
    let csv = dir.path().join("report.csv");
    let o = mmon(&["report", "--runs", path(&run), "--format", "csv", "--out", path(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("center"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mmon(&["gen", "--config", "center", "--n", "8", "--out", path(&data)]).status.success());
    let ckpt = |name: &str| {
        let run = dir.path().join(name);
        let o = mmon(&["train", "--data", path(&data), "--batch", "2", "--epochs", "1", "--out", path(&run)]);
        assert!(o.status.success());
        fs::read(run.join("model.mmn")).unwrap()
    };
    assert_eq!(ckpt("a"), ckpt("b"));
}

#[test]
fn gradcheck_passes() {
    let o = mmon(&["gradcheck", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("FAIL"));
}
