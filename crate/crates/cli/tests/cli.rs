use std::path::Path;
use std::process::{Command, Output};

fn eqm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("reach.eqmd");
    let out = eqm(&["gen-data", "--episodes", "10", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn small_model(dir: &Path, data: &Path) -> std::path::PathBuf {
    let out_dir = dir.join("model");
    let out = eqm(&["train", "--dataset", s(data), "--steps", "50", "--set", "hidden=16", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_dir.join("checkpoint.eqmf")
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert!(dir.path().join("reach.eqmd.config.txt").exists());
    let again = eqm(&["gen-data", "--episodes", "10", "--out", s(&data)]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&eqm(&["gen-data", "--episodes", "10", "--force", "--out", s(&data)])), 0);
}

#[test]
fn zero_episode_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqm(&["gen-data", "--episodes", "0", "--out", s(&dir.path().join("x.eqmd"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_and_missing_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqm(&["verify-prop1", "--set", "colour=blue", "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `colour`"));
    assert_eq!(code(&eqm(&["verify-prop1"])), 1);
    assert_eq!(code(&eqm(&["scan-threshold", "--out", s(dir.path())])), 1);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out_a = dir.path().join("from_file");
    let out_b = dir.path().join("from_flag");
    std::fs::write(&cfg, format!("# verification run\nseed = 7\nout = {}  # outputs\n", s(&out_a))).unwrap();
    assert_eq!(code(&eqm(&["verify-prop1", "--config", s(&cfg)])), 0);
    let resolved = std::fs::read_to_string(out_a.join("config.txt")).unwrap();
    assert!(resolved.contains("seed=7\n"));

    assert_eq!(code(&eqm(&["verify-prop1", "--config", s(&cfg), "--seed", "9", "--out", s(&out_b)])), 0);
    let resolved = std::fs::read_to_string(out_b.join("config.txt")).unwrap();
    assert!(resolved.contains("seed=9\n"));
}

#[test]
fn verify_writes_report_and_descent_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqm(&["verify-prop1", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0);
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("[PASS] descent bound"));
    assert!(report.contains("[PASS] contraction"));
    assert!(report.contains("[PASS] sufficient iterations"));
    assert!(report.contains("SKIP (outside hypothesis)"));
    let csv = std::fs::read_to_string(dir.path().join("descent.csv")).unwrap();
    assert!(csv.starts_with("k,energy,residual,bound\n"));
}

#[test]
fn train_zero_steps_and_objective_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out_dir = dir.path().join("init");
    let out = eqm(&["train", "--dataset", s(&data), "--steps", "0", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0);
    assert!(out_dir.join("checkpoint.eqmf").exists());
    assert_eq!(std::fs::read_to_string(out_dir.join("loss.csv")).unwrap(), "step,loss\n");

    let bad = eqm(&[
        "train", "--dataset", s(&data), "--objective", "flow", "--set", "time_conditioned=false",
        "--steps", "1", "--out", s(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("time-conditioned"));
}

#[test]
fn solve_writes_chunk_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = small_model(dir.path(), &data);
    let out_dir = dir.path().join("solve");
    let cond = "0.2,0.3,1,0.7,0.6,0.7,0.6";
    let out = eqm(&["solve", "--checkpoint", s(&ckpt), "--cond", cond, "--tau", "0", "--max-iters", "12", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("k,residual"));
    assert_eq!(lines.count(), 12, "tau = 0 runs to the cap");
    let chunk = std::fs::read_to_string(out_dir.join("chunk.csv")).unwrap();
    assert!(chunk.starts_with("step,a0,a1\n"));
    assert_eq!(chunk.lines().count(), 9);

    let wrong = eqm(&["solve", "--checkpoint", s(&ckpt), "--cond", "1,2", "--out", s(&out_dir)]);
    assert_eq!(code(&wrong), 1);
}

#[test]
fn non_finite_input_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = small_model(dir.path(), &data);
    let out = eqm(&[
        "solve", "--checkpoint", s(&ckpt), "--cond", "0.2,NaN,1,0.7,0.6,0.7,0.6", "--out", s(&dir.path().join("nan")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqm(&[
        "warm-start-study", "--checkpoint", s(&dir.path().join("nope.eqmf")), "--out", s(&dir.path().join("w")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn scan_rejects_unsorted_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = small_model(dir.path(), &data);
    let out = eqm(&["scan-threshold", "--checkpoint", s(&ckpt), "--taus", "1,0.1", "--out", s(&dir.path().join("scan"))]);
    assert_eq!(code(&out), 1);
    let ok = eqm(&[
        "scan-threshold", "--checkpoint", s(&ckpt), "--taus", "0.5", "--episodes", "3", "--max-iters", "8",
        "--out", s(&dir.path().join("scan")),
    ]);
    assert_eq!(code(&ok), 0);
    let csv = std::fs::read_to_string(dir.path().join("scan/scan_threshold.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("tau,success_rate,mean_iterations,median_iterations\n"));
}
