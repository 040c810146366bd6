use std::path::Path;
use std::process::{Command, Output};

use kinising::io::read_csv;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinising")).current_dir(dir).args(args).output().unwrap()
}

fn generate(dir: &Path, seed: &str, traj: &str) -> Output {
    run(dir, &["generate", "--n", "5", "--t-end", "8", "--seed", seed, "--out-model", "model.json", "--out-traj", traj])
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let out = run(dir.path(), &[flag]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn bad_input_exits_with_one_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let cases: [&[&str]; 4] = [
        &["fit-em", "--traj", "missing.json", "--out", "m.json"],
        &["fit-em", "--traj", "broken.json", "--out", "m.json"],
        &["fit-em", "--no-such-flag"],
        &["repro", "fig9", "--out-dir", "x"],
    ];
    for args in cases {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
}

#[test]
fn generate_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, name) in [("4", "a.json"), ("4", "b.json"), ("5", "c.json")] {
        assert!(generate(dir.path(), seed, name).status.success());
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn fit_em_trace_never_decreases() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "2", "t.json").status.success());
    let out = run(dir.path(), &["fit-em", "--traj", "t.json", "--out", "fit.json", "--trace", "trace.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read_csv(&dir.path().join("trace.csv")).unwrap();
    let ll = trace.column("loglik").unwrap();
    assert!(ll.len() > 2);
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()), "{ll:?}");
    let mse = run(dir.path(), &["eval", "mse", "--true", "model.json", "--est", "fit.json", "--out", "mse.csv"]);
    assert!(String::from_utf8(mse.stdout).unwrap().starts_with("mse="));
}

#[test]
fn replay_reproduces_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "3", "t.json").status.success());
    let fit = run(dir.path(), &["fit-vb", "--traj", "t.json", "--lambda", "10", "--out-posterior", "p.json"]);
    assert!(fit.status.success());
    let first = std::fs::read(dir.path().join("p.json")).unwrap();
    std::fs::remove_file(dir.path().join("p.json")).unwrap();
    let again = run(dir.path(), &["replay", "p.json.manifest.json"]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(std::fs::read(dir.path().join("p.json")).unwrap(), first);
}

#[test]
fn roc_from_a_posterior_is_a_probability() {
    let dir = tempfile::tempdir().unwrap();
    let gen = run(dir.path(), &["generate", "--n", "6", "--t-end", "10", "--p-sparse", "0.5", "--seed", "9", "--out-model", "m.json", "--out-traj", "t.json"]);
    assert!(gen.status.success());
    assert!(run(dir.path(), &["fit-vb", "--traj", "t.json", "--lambda", "20", "--out-posterior", "p.json"]).status.success());
    let out = run(dir.path(), &["eval", "roc", "--true", "m.json", "--posterior", "p.json", "--exclude-diagonal", "--out", "roc.csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let auc: f64 = text.trim().strip_prefix("auc=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
