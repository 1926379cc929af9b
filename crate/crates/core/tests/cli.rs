use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "episode": { "n_steps": 6 },
  "policy": { "lstm": [4], "dense": [4] },
  "train": { "epochs": 2, "batch_size": 16, "patience": null },
  "dagger": { "episodes_initial": 2, "episodes_per_iter": 1, "n_iterations": 1 },
  "evaluation": { "episodes": 2 }
}"#;

fn run<S: AsRef<std::ffi::OsStr>>(cwd: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagger-charge"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_deterministic_traces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&run(d, &["--out", out, "--seed", "7", "simulate", "--policy", "expert", "--scenario", "nominal"]));
    }
    let a = std::fs::read(d.join("a/trace_expert.csv")).unwrap();
    let b = std::fs::read(d.join("b/trace_expert.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 431);
    let mut entries: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, ["a", "b"]);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--config", "missing.json", "simulate"])), 2);
    std::fs::write(d.join("bad.json"), r#"{"expert": {"horizn": 2}}"#).unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.json", "simulate"])), 2);
    std::fs::write(d.join("broken.json"), "{").unwrap();
    assert_eq!(code(&run(d, &["--config", "broken.json", "simulate"])), 2);
    assert_eq!(code(&run(d, &["evaluate", "--episodes", "0", "--include-expert"])), 2);
    assert_eq!(code(&run(d, &["train", "dagger", "--scale", "0"])), 2);
    assert_eq!(code(&run(d, &["bench", "--states", "5"])), 2);
    assert_eq!(code(&run(d, &["frobnicate"])), 2);
    assert_eq!(code(&run(d, &["evaluate"])), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&run(d, &["simulate", "--policy", "junk.ckpt"])), 1);
}

#[test]
fn train_resume_evaluate_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let base = ["--config", cfg.as_str(), "--out", "run", "--seed", "3"];
    let with = |extra: &[&'static str]| -> Vec<String> {
        base.iter().chain(extra).map(|s| s.to_string()).collect()
    };

    ok(&run(d, &with(&["train", "dagger"])));
    for f in ["iter00.ckpt", "iter01.ckpt", "iter01.report.json", "policy_final.ckpt", "run_config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&run(d, &with(&["train", "dagger", "--iters", "2", "--resume"])));
    assert!(d.join("run/iter02.ckpt").exists());

    ok(&run(d, &with(&["train", "bc", "--episodes", "2"])));
    assert!(d.join("run/policy_bc.ckpt").exists());

    ok(&run(d, &with(&["evaluate", "--include-expert"])));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/eval.report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["policies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["dagger", "bc", "expert"]);
    for p in report["policies"].as_array().unwrap() {
        assert_eq!(p["steps"], 12);
    }
    for name in ["dagger", "bc", "expert"] {
        let hist = std::fs::read_to_string(d.join(format!("run/hist_{name}.csv"))).unwrap();
        assert_eq!(hist.lines().next().unwrap(), "bin_lo,bin_hi,count");
    }

    ok(&run(d, &with(&["bench", "--horizons", "1,2,4,8,16", "--states", "30"])));
    let timing = std::fs::read_to_string(d.join("run/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 11);
}
