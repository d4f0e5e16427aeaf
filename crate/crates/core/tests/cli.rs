use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bdkd::gradcore::{checkpoint, small_cnn, Model};

fn bdkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdkd"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(bdkd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bdkd(&["gen-corpus", "--out", out, "--count", "0"]).status.code(), Some(2));
    assert_eq!(bdkd(&["gen-corpus", "--out", out, "--count", "many"]).status.code(), Some(2));
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "corpus.colour = 3\n").unwrap();
    let o = bdkd(&["gen-corpus", "--out", out, "--config", path(&conf)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus.colour"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.bdkd");
    fs::write(&bogus, b"NOPE and some bytes").unwrap();
    let o = bdkd(&["eval", "--out", path(dir.path()), "--model", path(&bogus)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("BDKD"));
    let o = bdkd(&["eval", "--out", path(dir.path()), "--model", path(&dir.path().join("missing.bdkd"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn untrained_model_scores_chance_and_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::zeroed([3, 8, 8], small_cnn(&[4], 10)).unwrap();
    let file = dir.path().join("zero.bdkd");
    checkpoint::save(&model, &file).unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# tiny task\ntask.size=8\ntask.test_per_class = 5\ntask.train_per_class=1\ntask.val_per_class=1\n").unwrap();
    let out = dir.path().join("eval");
    let o = bdkd(&["eval", "--out", path(&out), "--config", path(&conf), "--model", path(&file), "--task-seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "0.1000");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "eval");
    assert_eq!(summary["config"]["task.size"], "8");
    assert_eq!(summary["config"]["task.seed"], "4");
    assert_eq!(summary["config"]["distill.tau"], "20");
}

#[test]
fn gen_task_writes_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = bdkd(&[
        "gen-task", "--out", path(dir.path()), "--size", "8", "--train-per-class", "2",
        "--val-per-class", "1", "--test-per-class", "1",
    ]);
    assert!(o.status.success());
    let train = bdkd::dataset::LabeledSet::read_dir(&dir.path().join("train")).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(train.num_classes(), 10);
}
