//! Black-box tests of the `ulpt` binary: exit codes, artifact layout, and
//! the documented output contract.

use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ulpt"));
    cmd.env_remove("ULPT_OUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

#[test]
fn param_accounting_run_with_zero_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--mode",
        "ulpt",
        "--r",
        "2",
        "--n",
        "100",
        "--d",
        "768",
        "--task",
        "quadratic",
        "--steps",
        "0",
        "--warmup",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(
        summary["trainable_params"], 1736,
        "flagship shape at r=2 stores 1736 scalars"
    );
    assert_eq!(summary["status"]["kind"], "completed");
    assert_eq!(summary["trace_rows"], 0, "zero steps leave an empty trace");
}

#[test]
fn zero_learning_rate_leaves_the_loss_flat() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--task",
        "quadratic",
        "--steps",
        "40",
        "--optimizer",
        "gd",
        "--lr-policy",
        "constant",
        "--lr",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    stdout_json(&out);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let losses: Vec<&str> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).expect("loss column"))
        .collect();
    assert_eq!(losses.len(), 40);
    assert!(
        losses.iter().all(|&l| l == losses[0]),
        "every traced loss must equal the first at lr 0"
    );
}

#[test]
fn config_errors_exit_2() {
    let out = run(&["train", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2), "invalid n");

    let out = run(&["train", "--steps", "100"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "default warmup longer than the run is a config error"
    );

    let out = run(&["tune-p-vs-z", "--budget", "100"]);
    assert_eq!(out.status.code(), Some(2), "infeasible budget");

    let out = run(&["train", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2), "unknown flags are rejected");
}

#[test]
fn diverged_runs_exit_3_but_keep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--task",
        "quadratic",
        "--steps",
        "50",
        "--optimizer",
        "gd",
        "--lr-policy",
        "constant",
        "--lr",
        "1e9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("summary still printed");
    assert_eq!(summary["status"]["kind"], "diverged");
    assert!(summary["final_loss"].is_null());
    assert!(
        summary["checkpoint"].is_null(),
        "a diverged run must not leave a checkpoint"
    );
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    for line in trace.lines().skip(1) {
        let loss: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(loss.is_finite(), "trace rows are all finite: {line}");
    }
    assert!(!dir.path().join("prompt.ulpt").exists());
}

#[test]
fn unreadable_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ulpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&["analyze-dims", "--ckpt", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let missing = dir.path().join("nothing-here.ulpt");
    let out = run(&["analyze-dims", "--ckpt", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn out_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--task",
            "quadratic",
            "--steps",
            "5",
            "--warmup",
            "1",
        ])
        .env("ULPT_OUT_DIR", dir.path())
        .output()
        .expect("binary runs");
    assert!(out.status.success());
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("trace.csv").exists());
    assert!(dir.path().join("prompt.ulpt").exists());
}

#[test]
fn projection_training_modes_report_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--task",
        "quadratic",
        "--mode",
        "dpt_learnable_p",
        "--steps",
        "5",
        "--warmup",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert!(
        summary["checkpoint"].is_null(),
        "a trainable projection cannot be stored as a seed"
    );
    assert!(!dir.path().join("prompt.ulpt").exists());
}

#[test]
fn registry_totals_a_directory_of_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for (name, r) in [("sentiment", "2"), ("entailment", "4")] {
        let sub = dir.path().join(name);
        let out = run(&[
            "train",
            "--task",
            "quadratic",
            "--n",
            "100",
            "--d",
            "768",
            "--r",
            r,
            "--steps",
            "0",
            "--warmup",
            "0",
            "--out",
            sub.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        std::fs::rename(
            sub.join("prompt.ulpt"),
            dir.path().join(format!("{name}.ulpt")),
        )
        .unwrap();
    }
    // A stray non-checkpoint file must not break the scan.
    std::fs::write(dir.path().join("notes.txt"), "scratch").unwrap();

    let out = run(&["registry", "--dir", dir.path().to_str().unwrap()]);
    let report = stdout_json(&out);
    assert_eq!(report["report"]["tasks"], 2);
    // r=2 stores 1736 floats, r=4 stores 1936; both replace 76800 dense.
    assert_eq!(report["report"]["stored_floats"], 1736 + 1936);
    assert_eq!(report["report"]["dense_floats"], 2 * 76_800);
    assert!(report["report"]["entries"]["sentiment"].is_object());
}

#[test]
fn jl_rank_prints_the_certified_rank() {
    let out = run(&[
        "jl",
        "rank",
        "--epsilon",
        "0.1",
        "--delta",
        "0.01",
        "--n",
        "100",
    ]);
    let v = stdout_json(&out);
    // ceil(2 * 0.1^-2 * ln(2*100/0.01)) = ceil(1980.7)
    assert_eq!(v["required_rank"], 1981);
}

#[test]
fn gradcheck_reports_per_mode_passes() {
    let out = run(&["gradcheck", "--instances", "5", "--seed", "3"]);
    let v = stdout_json(&out);
    assert_eq!(v["rows"].as_array().unwrap().len(), 6, "all six modes");
    assert_eq!(v["all_pass"], true);
}

#[test]
fn analyze_dims_emits_stats_for_k_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--task",
        "quadratic",
        "--steps",
        "60",
        "--warmup",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let ckpt = dir.path().join("prompt.ulpt");
    let out = run(&["analyze-dims", "--ckpt", ckpt.to_str().unwrap(), "--k", "6"]);
    let v = stdout_json(&out);
    assert_eq!(v["dims"].as_array().unwrap().len(), 6);
    for s in v["dims"].as_array().unwrap() {
        let (min, mean, max) = (
            s["min"].as_f64().unwrap(),
            s["mean"].as_f64().unwrap(),
            s["max"].as_f64().unwrap(),
        );
        assert!(min <= mean && mean <= max, "stats are ordered: {s}");
    }

    // Oversampling the width is a config error.
    let out = run(&[
        "analyze-dims",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--k",
        "60",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_align_needs_two_checkpoints_and_reports_both_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, r) in ["2", "4"].iter().enumerate() {
        let sub = dir.path().join(format!("run{i}"));
        let out = run(&[
            "train",
            "--task",
            "quadratic",
            "--r",
            r,
            "--steps",
            "60",
            "--warmup",
            "10",
            "--out",
            sub.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let named = dir.path().join(format!("rank{r}.ulpt"));
        std::fs::rename(sub.join("prompt.ulpt"), &named).unwrap();
        paths.push(named);
    }

    let out = run(&[
        "analyze-align",
        "--ckpt",
        paths[0].to_str().unwrap(),
        "--ckpt",
        paths[1].to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["shift"]["labels"], serde_json::json!(["rank2", "rank4"]));
    let diag = v["shift"]["matrix"][0][0].as_f64().unwrap();
    assert!((diag - 1.0).abs() < 1e-12, "self-similarity is 1");
    assert!(v["scale"]["mean_off_diagonal"].is_number());

    let out = run(&["analyze-align", "--ckpt", paths[0].to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "one checkpoint cannot align");
}

#[test]
fn ablate_csv_lists_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "ablate",
        "--task",
        "quadratic",
        "--modes",
        "ulpt,ulpt_no_scale,vanilla_pt",
        "--steps",
        "40",
        "--warmup",
        "10",
        "--format",
        "csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("mode,param_count,final_loss,final_eval,clamp_events,diverged")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("ulpt,"));
    assert!(rows[2].starts_with("vanilla_pt,"));
    assert!(
        dir.path().join("ablation.json").exists(),
        "JSON artifact accompanies the CSV projection"
    );
}

#[test]
fn tune_p_vs_z_reports_the_infeasible_side_as_null() {
    let out = run(&["tune-p-vs-z", "--budget", "1736"]);
    let v = stdout_json(&out);
    assert_eq!(v["tune_z"]["rank"], 2);
    assert_eq!(v["tune_z"]["params"], 1736);
    assert!(
        v["tune_p"]["rank"].is_null(),
        "the projection side cannot fit 1736 parameters at d=768"
    );
}

#[test]
fn tune_p_vs_z_trains_both_sides_when_steps_are_requested() {
    let out = run(&[
        "tune-p-vs-z",
        "--budget",
        "3136",
        "--n",
        "8",
        "--d",
        "32",
        "--steps",
        "300",
    ]);
    let v = stdout_json(&out);
    let z_loss = v["tune_z"]["final_loss"].as_f64().expect("z side trains");
    let p_loss = v["tune_p"]["final_loss"].as_f64().expect("p side trains");
    assert!(z_loss.is_finite() && p_loss.is_finite());
    assert!(z_loss >= 0.0 && p_loss >= 0.0);
}
