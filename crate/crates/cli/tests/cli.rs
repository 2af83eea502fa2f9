use std::path::Path;
use std::process::{Command, Output};

fn gridcrf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcrf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = "height = 20\nwidth = 16\nlabels = 4\ntrain_count = 3\ntest_count = 1\n\
                     pretrain_iters = 5\niterations = 10\nburn_in = 2\nsamples = 5\n";

fn setup(dir: &Path) {
    std::fs::write(dir.join("run.toml"), SMALL).unwrap();
    ok(&gridcrf(&["gen", "--config", "run.toml"], dir));
}

#[test]
fn infer_on_one_image_writes_one_map() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(&gridcrf(&["pretrain", "--config", "run.toml"], dir.path()));
    let stdout = ok(&gridcrf(&["infer", "--config", "run.toml", "--out", "preds"], dir.path()));
    assert!(stdout.contains("wrote 1 label maps"));
    let maps: Vec<_> = std::fs::read_dir(dir.path().join("preds")).unwrap().collect();
    assert_eq!(maps.len(), 1);
}

#[test]
fn pretrain_zero_iterations_leaves_checkpoint_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(&gridcrf(&["pretrain", "--config", "run.toml", "--iters", "0"], dir.path()));
    let first = std::fs::read(dir.path().join("model.ccrf")).unwrap();
    ok(&gridcrf(&["pretrain", "--config", "run.toml", "--iters", "0"], dir.path()));
    assert_eq!(std::fs::read(dir.path().join("model.ccrf")).unwrap(), first);
    ok(&gridcrf(&["pretrain", "--config", "run.toml", "--iters", "2"], dir.path()));
    assert_ne!(std::fs::read(dir.path().join("model.ccrf")).unwrap(), first);
}

#[test]
fn train_variants_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(&gridcrf(&["pretrain", "--config", "run.toml"], dir.path()));
    for (variant, mode) in [("cd1", "--separate"), ("cd5", "--joint"), ("pcd", "--joint")] {
        let out = format!("run_{variant}");
        ok(&gridcrf(&["train", "--config", "run.toml", "--variant", variant, mode, "--out", &out], dir.path()));
        assert!(dir.path().join(&out).join("model.ccrf").exists());
        let log = std::fs::read_to_string(dir.path().join(&out).join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 10);
    }
    let table = ok(&gridcrf(
        &["eval", "--config", "run.toml", "--checkpoint", "run_pcd/model.ccrf", "--burn-in", "1", "--samples", "3"],
        dir.path(),
    ));
    assert!(table.contains("cnn-only") && table.contains("cnn+crf"));
}

#[test]
fn repeated_train_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(&gridcrf(&["pretrain", "--config", "run.toml"], dir.path()));
    for out in ["a", "b"] {
        ok(&gridcrf(&["train", "--config", "run.toml", "--variant", "pcd", "--joint", "--seed", "3", "--out", out], dir.path()));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/model.ccrf"), read("b/model.ccrf"));
    assert_eq!(read("a/metrics.jsonl"), read("b/metrics.jsonl"));
}

#[test]
fn errors_are_one_structured_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "nonsense_key = 1\n").unwrap();
    let out = gridcrf(&["gen", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[config]:"), "{stderr}");

    let out = gridcrf(&["train", "--checkpoint", "missing.ccrf"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let out = gridcrf(&["train", "--separate", "--joint"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn oracle_prints_exact_summary() {
    let dir = tempfile::tempdir().unwrap();
    let instance = r#"{"labels":2,"height":1,"width":2,"classes":[[1,0]],"tables":[[0,3,3,0]],"unaries":[0,1,2,0],"data":[0,1]}"#;
    std::fs::write(dir.path().join("tiny.json"), instance).unwrap();
    let stdout = ok(&gridcrf(&["oracle", "tiny.json"], dir.path()));
    assert!(stdout.contains("\"log_z\"") && stdout.contains("\"log_likelihood\""));

    std::fs::write(dir.path().join("big.json"), format!(
        r#"{{"labels":2,"height":5,"width":5,"classes":[],"tables":[],"unaries":[{}]}}"#,
        vec!["0"; 50].join(",")
    ))
    .unwrap();
    let out = gridcrf(&["oracle", "big.json"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[too-large]:"));
}
