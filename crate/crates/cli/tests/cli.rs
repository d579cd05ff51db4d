use std::path::Path;
use std::process::{Command, Output};

fn elicit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elicit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn simulate_expert_writes_every_statistic() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(
        &["simulate-expert", "--model", "case1", "--out", "exp.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 10);
    assert!(stdout.contains("r2\thistogram\t300"));
    let text = std::fs::read_to_string(dir.path().join("exp.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["statistics"].as_array().unwrap().len(), 10);

    let o = elicit(
        &["simulate-expert", "--model", "case1", "--out", "again.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        text,
        std::fs::read_to_string(dir.path().join("again.json")).unwrap()
    );
}

#[test]
fn unknown_model_and_missing_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(
        &["simulate-expert", "--model", "case9", "--out", "x.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("case9"));

    // a model file without true values
    let spec = elicit_core::models::builtin("case2").unwrap();
    let mut bare = spec.clone();
    bare.hyperparameters.iter_mut().for_each(|h| h.true_value = None);
    bare.save(dir.path().join("bare.json")).unwrap();
    let o = elicit(
        &["simulate-expert", "--model-file", "bare.json", "--out", "x.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu0"));
    let o = elicit(
        &[
            "simulate-expert",
            "--model-file",
            "bare.json",
            "--lambda",
            "mu0=-0.5,sigma0=0.06,mu1=0.26,sigma1=0.04",
            "--samples",
            "50",
            "--out",
            "ok.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn fit_runs_requested_epochs_and_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(
        &[
            "simulate-expert",
            "--model",
            "case2",
            "--samples",
            "60",
            "--out",
            "exp.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let args = [
        "fit",
        "--model",
        "case2",
        "--expert",
        "exp.json",
        "--out",
        "run",
        "--epochs",
        "10",
        "--set",
        "batch_size=8",
        "--set",
        "model_samples=20",
    ];
    let o = elicit(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 11);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/result.json")).unwrap()).unwrap();
    assert_eq!(result["epochs"], 10);
    assert_eq!(result["lambda_final"].as_array().unwrap().len(), 4);
    assert_eq!(result["recovery_error"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch 10/10"));

    // identical settings, with and without worker threads, give identical traces
    let mut threaded = args.to_vec();
    threaded[6] = "run2";
    threaded.extend(["--jobs", "2"]);
    assert_eq!(code(&elicit(&threaded, dir.path())), 0);
    assert_eq!(
        trace,
        std::fs::read_to_string(dir.path().join("run2/trace.csv")).unwrap()
    );
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        "{\"model\": \"case2\", \"statistics\": [",
    )
    .unwrap();
    let o = elicit(
        &["fit", "--model", "case2", "--expert", "bad.json", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let o = elicit(
        &[
            "simulate-expert",
            "--model",
            "case1",
            "--out",
            "c1.json",
            "--samples",
            "20",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let o = elicit(
        &["fit", "--model", "case2", "--expert", "c1.json", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("y_x0"));
    let o = elicit(
        &[
            "fit",
            "--model",
            "case2",
            "--expert",
            "c1.json",
            "--set",
            "epochs=zero",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let o = elicit(&["study", "case7"], dir.path());
    assert_eq!(code(&o), 2);
    let o = elicit(&["fit", "--expert", "c1.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(
        &[
            "simulate-expert",
            "--model",
            "case1",
            "--samples",
            "30",
            "--out",
            "exp.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let o = elicit(
        &[
            "fit",
            "--model",
            "case1",
            "--expert",
            "exp.json",
            "--out",
            "r",
            "--epochs",
            "3",
            "--set",
            "batch_size=2",
            "--set",
            "model_samples=5",
            "--set",
            "lr_initial=1e300",
            "--set",
            "lr_min=1e300",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn studies_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--epochs",
        "2",
        "--set",
        "batch_size=3",
        "--set",
        "model_samples=10",
        "--set",
        "expert_samples=20",
    ];
    let mut args = vec!["study", "threshold", "--t-u", "5,15,30", "--out", "o"];
    args.extend(small);
    let o = elicit(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("o/threshold/2023/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);

    let mut args = vec!["study", "inconsistency", "--scenario", "double-s", "--out", "o"];
    args.extend(small);
    assert_eq!(code(&elicit(&args, dir.path())), 0);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("o/inconsistency-double-s/2023/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["directions"].as_array().unwrap().len(), 7);

    let mut args = vec!["study", "case2", "--out", "o"];
    args.extend(small);
    assert_eq!(code(&elicit(&args, dir.path())), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/case2/2023/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 2023);
    assert!(dir.path().join("o/case2/2023/trace.csv").exists());
}
