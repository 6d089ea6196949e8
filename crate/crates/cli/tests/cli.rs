use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fixnorm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fixnorm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const SMALL: &str = "epochs = 5\nwarmup_epochs = 1\nbatch_size = 16\nblobs_classes = 3\nblobs_dim = 4\nblobs_per_class = 40\n";

#[test]
fn gradcheck_passes_and_prints_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = fixnorm(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert_eq!(s.lines().filter(|l| l.ends_with(" ok")).count(), 15);
    assert!(!s.contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        fixnorm(&["train", "--out", "x"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(fixnorm(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        fixnorm(&["gradcheck", "--bogus"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "lr = 0.5\nlearnin_rate = 1\n").unwrap();
    let out = fixnorm(
        &["train", "--config", "bad.toml", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("learnin_rate"));

    fs::write(
        dir.path().join("wn.toml"),
        "mode = \"WN_FC\"\nweight_decay = 0.001\n",
    )
    .unwrap();
    let out = fixnorm(
        &["train", "--config", "wn.toml", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("weight_decay"));
}

#[test]
fn missing_config_file_is_internal_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = fixnorm(
        &["train", "--config", "nope.toml", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nope.toml"));
}

#[test]
fn train_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for run in ["a", "b"] {
        let out = fixnorm(&["train", "--config", "c.toml", "--out", run], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    }
    let a = fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(text(&a).lines().count(), 5);
    assert!(dir.path().join("a/result.json").is_file());
    assert!(dir.path().join("a/config.toml").is_file());
}

#[test]
fn tune_then_report_shows_eleven_fold_budget() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        format!("{SMALL}budgets = [1, 5]\nparallelism = 4\n"),
    )
    .unwrap();
    let out = fixnorm(&["tune", "--config", "c.toml", "--out", "t"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("55 planned = 11.00 x T_max"));
    let ledger = fs::read_to_string(dir.path().join("t/ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 15);

    let out = fixnorm(&["report", "t", "--out", "rep"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(
        s.contains("55 epochs consumed, 55 planned = 11.00 x T_max"),
        "{s}"
    );
    let csv = fs::read_to_string(dir.path().join("rep/mcbr_val.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 16);
}

#[test]
fn report_over_paired_runs_has_two_mcbr_columns() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("wn.toml"),
        format!("{SMALL}mode = \"WN_FC\"\n"),
    )
    .unwrap();
    fs::write(
        dir.path().join("fx.toml"),
        format!("{SMALL}mode = \"FIXNORM_FC\"\nalpha = 0.5\n"),
    )
    .unwrap();
    fs::write(
        dir.path().join("a1.toml"),
        format!("{SMALL}mode = \"ALGO1\"\n"),
    )
    .unwrap();
    for (cfg, out) in [("wn.toml", "wn"), ("fx.toml", "fx"), ("a1.toml", "algo1")] {
        assert_eq!(
            fixnorm(&["train", "--config", cfg, "--out", out], dir.path())
                .status
                .code(),
            Some(0)
        );
    }
    let out = fixnorm(&["report", "wn", "fx", "--out", "rep"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("rep/mcbr_val.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,wn,fx");
    assert_eq!(csv.lines().count(), 6);

    assert_eq!(
        fixnorm(&["report", "algo1", "--out", "rep1"], dir.path())
            .status
            .code(),
        Some(0)
    );
    let norms = fs::read_to_string(dir.path().join("rep1/group_norm.csv")).unwrap();
    let vals: Vec<f64> = norms
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(vals.iter().all(|v| ((v - vals[0]) / vals[0]).abs() < 1e-9));
}

#[test]
fn report_rejects_unknown_directories() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(
        fixnorm(&["report", "empty"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn data_synth_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let out = fixnorm(
        &["data", "synth", "--config", "c.toml", "--out", "blobs"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let train = fs::read_to_string(dir.path().join("blobs/train.csv")).unwrap();
    assert_eq!(train.lines().next().unwrap(), "label,x0,x1,x2,x3");
    assert_eq!(train.lines().count(), 1 + 96);

    let out = fixnorm(&["data", "inspect", "--config", "c.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("train: 96 samples"));

    let mut idx = vec![0, 0, 8, 1, 0, 0, 0, 3];
    idx.extend([1, 2, 3]);
    fs::write(dir.path().join("labels.idx"), idx).unwrap();
    let out = fixnorm(&["data", "inspect", "labels.idx"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("IDX labels: dims [3]"));

    fs::write(dir.path().join("junk.bin"), [1u8; 10]).unwrap();
    assert_eq!(
        fixnorm(&["data", "inspect", "junk.bin"], dir.path())
            .status
            .code(),
        Some(1)
    );
}
