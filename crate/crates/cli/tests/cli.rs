use std::path::Path;
use std::process::{Command, Output};

fn vcrd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcrd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn trust_region_reference_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcrd(
        &[
            "trust-region",
            "--pi",
            "0.5,0.3,0.2",
            "--r",
            "0,1,0",
            "--delta",
            "0.05",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let eta: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("eta = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(eta > 0.6477 && eta <= 0.6478, "{eta}");
    assert!(out.contains("active = true"));
}

#[test]
fn trust_region_payload_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let payload = dir.path().join("tr.json");
    std::fs::write(
        &payload,
        r#"{"pi": [0.5, 0.3, 0.2], "r": [0, 1, 0], "delta": 0.05}"#,
    )
    .unwrap();
    let o = vcrd(
        &["trust-region", "--payload", "tr.json", "--verify"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("verified = true"));

    std::fs::write(&payload, r#"{"pi": [0.5, 0.5]}"#).unwrap();
    let o = vcrd(&["trust-region", "--payload", "tr.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcrd(&["distill", "--config", "absent/run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent/run.cfg"));
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vcrd(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        vcrd(&["distill", "--bogus"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        vcrd(&["distill", "--set", "no_such_key=1"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        vcrd(&["distill", "--set", "alpha=2"], dir.path())
            .status
            .code(),
        Some(1)
    );
    let help = vcrd(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("analyze-ratios"));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // an untrained teacher cannot beat the warm-start student
    let o = vcrd(
        &[
            "distill",
            "--set",
            "teacher_epochs=0",
            "--set",
            "iterations=2",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn distill_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "# short run\niterations = 30\neval_every = 10\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for (out, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let o = vcrd(
            &[
                "distill",
                "--config",
                "run.cfg",
                "--seed",
                "7",
                "--workers",
                workers,
                "--out-dir",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read(dir.path().join(out).join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let summary = std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(json["config"]["seed"], "7");
    assert_eq!(json["config"]["iterations"], "30");
}

#[test]
fn checkpoint_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let set = [
        "--set",
        "train_size=60",
        "--set",
        "probe_size=60",
        "--out-dir",
        "out",
    ];
    let run = |cmd: &[&str]| {
        let args: Vec<&str> = cmd.iter().chain(set.iter()).copied().collect();
        let o = vcrd(&args, p);
        assert!(o.status.success(), "{:?}: {}", cmd, stderr(&o));
        stdout(&o)
    };
    run(&["gen-data"]);
    assert!(p.join("out/train.txt").exists() && p.join("out/probe.txt").exists());
    run(&["train-teacher", "--train", "out/train.txt"]);
    run(&["sft-student"]);
    let acc = run(&[
        "eval",
        "--policy",
        "out/teacher.ckpt",
        "--data",
        "out/probe.txt",
    ]);
    assert!(acc.starts_with("accuracy = "));
    run(&[
        "distill",
        "--teacher",
        "out/teacher.ckpt",
        "--student",
        "out/student_sft.ckpt",
        "--set",
        "iterations=5",
    ]);
    assert!(p.join("out/student.ckpt").exists());
    let ratios = run(&[
        "analyze-ratios",
        "--teacher",
        "out/teacher.ckpt",
        "--student",
        "out/student_sft.ckpt",
    ]);
    assert!(ratios.starts_with("prefix,positions,ge_one,fraction_ge_one"));
    let hist = std::fs::read_to_string(p.join("out/ratio_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 42);
}

#[test]
fn ablate_subset() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcrd(
        &[
            "ablate",
            "--variants",
            "vcrd,uniform",
            "--set",
            "ablate_seeds=2",
            "--set",
            "iterations=5",
            "--out-dir",
            "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("uniform"));
    let csv = std::fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let o = vcrd(&["ablate", "--variants", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
