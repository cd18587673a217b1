//! Black-box tests of the command-line binary: flag/file precedence,
//! schema rejection, and exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stpuzzle"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn stpuzzle")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_tiny_dataset(dir: &Path) {
    let out = run(
        &["gen-data", "--classes", "2", "--clips-per-class", "2", "--out", "data", "--seed", "3"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["--help"], dir.path())), 0);
    assert_eq!(code(&run(&["--version"], dir.path())), 0);
    assert_eq!(code(&run(&["pretrain", "--help"], dir.path())), 0);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown config key.
    fs::write(dir.path().join("bad.conf"), "stepz = 5\n").unwrap();
    let out = run(&["pretrain", "--config", "bad.conf"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
    // Malformed value.
    fs::write(dir.path().join("bad.conf"), "steps = soon\n").unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", "bad.conf"], dir.path())), 1);
    // Unknown flag (usage error).
    assert_eq!(code(&run(&["pretrain", "--stepz", "5"], dir.path())), 1);
    // Missing dataset.
    assert_eq!(code(&run(&["pretrain"], dir.path())), 1);
    // Invalid enum value.
    assert_eq!(code(&run(&["pretrain", "--task", "q"], dir.path())), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Dataset directory without an index.
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = run(
        &["pretrain", "--data", "empty", "--steps", "1", "--batch-size", "1"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    // Corrupted checkpoint magic.
    fs::write(dir.path().join("bad.ckpt"), b"XXXX-not-a-checkpoint").unwrap();
    let out = run(
        &["export-filters", "--checkpoint", "bad.ckpt", "--out", "f"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    fs::write(
        dir.path().join("run.conf"),
        "steps = 6\neval_every = 3\nbatch_size = 2\ndata_dir = data\nvariant = tiny\n",
    )
    .unwrap();
    let out = run(
        &["pretrain", "--config", "run.conf", "--steps", "2", "--out", "pre", "--deterministic"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("pre/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    // With flag steps=2 winning over file steps=6 the only row is the final
    // step; a file win would leave rows at steps 3 and 6.
    assert_eq!(rows.len(), 1, "{metrics}");
    assert!(rows[0].starts_with("2,train,"), "{metrics}");
    // The archived config echoes the resolved values.
    let echo = fs::read_to_string(dir.path().join("pre/config.txt")).unwrap();
    assert!(echo.contains("steps = 2"), "{echo}");
}

#[test]
fn gen_data_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["gen-data", "--classes", "4", "--clips-per-class", "2", "--out", "d4"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let header = fs::read_to_string(dir.path().join("d4/header.txt")).unwrap();
    assert!(header.contains("num_classes=4"), "{header}");
    let index = fs::read_to_string(dir.path().join("d4/index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 8);
    // Odd class counts cannot form time-mirror pairs.
    let out = run(&["gen-data", "--classes", "3", "--out", "d3"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("d3").exists(), "failed command must not create output");
}

#[test]
fn eval_requires_action_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    let out = run(
        &[
            "pretrain", "--data", "data", "--steps", "2", "--batch-size", "2",
            "--eval-every", "2", "--out", "pre", "--deterministic",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // A puzzle checkpoint has no action head; eval must refuse it.
    let out = run(
        &["eval", "--data", "data", "--checkpoint", "pre/checkpoint.ckpt", "--test-per-class", "1"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("action"), "{}", stderr(&out));
}

#[test]
fn finetune_rejects_mismatched_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    let out = run(
        &[
            "pretrain", "--data", "data", "--steps", "2", "--batch-size", "2",
            "--eval-every", "2", "--out", "pre", "--deterministic",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // Same checkpoint, different claimed variant.
    let out = run(
        &[
            "finetune", "--data", "data", "--init", "pre/checkpoint.ckpt", "--variant", "resnet10",
            "--steps", "1", "--batch-size", "1", "--num-classes", "2", "--test-per-class", "1",
            "--out", "ft",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}
