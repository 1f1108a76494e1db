use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/synthetic_200.conf");

fn confloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confloc")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = confloc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn sweep_on_fixture_writes_twenty_rows_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let start = Instant::now();
    run_ok(&["sweep", "--config", FIXTURE, "--out", out]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let text = fs::read_to_string(dir.path().join("sweep_coords_0.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 21);
    assert!(lines[0].starts_with("alpha,target_coverage,empirical_coverage"));
    let coverage: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(coverage[0], 1.0);
    assert_eq!(coverage[19], 0.0);
}

#[test]
fn alpha_zero_sets_contain_every_truth() {
    for task in ["coords", "floor", "building"] {
        let dir = tempfile::tempdir().unwrap();
        let set = format!("task={task}");
        run_ok(&[
            "predict-sets",
            "--config",
            FIXTURE,
            "--alpha",
            "0",
            "--set",
            &set,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let text = fs::read_to_string(dir.path().join(format!("sets_{task}_0.csv"))).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let covered = header.iter().position(|h| *h == "COVERED").unwrap();
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|l| l.split(',').nth(covered) == Some("1")), "{task}");
    }
}

#[test]
fn every_subcommand_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        for cmd in [
            "ingest",
            "synth",
            "split",
            "fit",
            "calibrate",
            "predict-sets",
            "risk",
            "pvalue-filter",
            "sweep",
        ] {
            run_ok(&[
                cmd,
                "--config",
                FIXTURE,
                "--seed",
                "17",
                "--out",
                dir.path().to_str().unwrap(),
            ]);
        }
    }
    let (ca, cb) = (dir_contents(a.path()), dir_contents(b.path()));
    assert_eq!(ca.keys().collect::<Vec<_>>(), cb.keys().collect::<Vec<_>>());
    assert!(ca.len() >= 11);
    for (name, bytes) in &ca {
        assert_eq!(bytes, &cb[name], "{name} differs");
    }
}

#[test]
fn seed_changes_the_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok(&[
        "sweep",
        "--config",
        FIXTURE,
        "--seed",
        "1",
        "--out",
        a.path().to_str().unwrap(),
    ]);
    run_ok(&[
        "sweep",
        "--config",
        FIXTURE,
        "--seed",
        "2",
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert_ne!(
        fs::read(a.path().join("sweep_coords_1.csv")).unwrap(),
        fs::read(b.path().join("sweep_coords_2.csv")).unwrap()
    );
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = confloc(&["teleport"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(confloc(&[]).status.code(), Some(2));
}

#[test]
fn validation_failures_exit_one_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cases: [(&[&str], &str); 5] = [
        (&["sweep", "--config", FIXTURE, "--alpha", "1.5"], "alpha"),
        (&["sweep", "--config", FIXTURE, "--set", "no_such_key=1"], "no_such_key"),
        (&["sweep", "--set", "seed=1"], "dataset source"),
        (&["risk", "--config", FIXTURE, "--beta", "0"], "beta"),
        (
            &[
                "calibrate",
                "--config",
                FIXTURE,
                "--set",
                "dataset_path=/nonexistent.csv",
            ],
            "dataset source",
        ),
    ];
    for (args, needle) in cases {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--out", out_dir.to_str().unwrap()]);
        let out = confloc(&full);
        assert_eq!(out.status.code(), Some(1), "{full:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            stderr.starts_with("error:") && stderr.contains(needle),
            "{full:?}: {stderr}"
        );
    }
    let missing = confloc(&[
        "ingest",
        "--set",
        "dataset_path=/nonexistent/train.csv",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/train.csv"));
}

#[test]
fn failed_runs_leave_no_partial_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = confloc(&[
        "predict-sets",
        "--config",
        FIXTURE,
        "--set",
        "predictor=import",
        "--set",
        "predictions_path=/nonexistent.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir_contents(dir.path()).is_empty());
}

#[test]
fn imported_predictions_reproduce_the_knn_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["fit", "--config", FIXTURE, "--out", out]);
    run_ok(&["calibrate", "--config", FIXTURE, "--out", out]);
    let knn = fs::read(dir.path().join("calibration_coords_0.csv")).unwrap();

    let imported = tempfile::tempdir().unwrap();
    let predictions = dir.path().join("predictions_0.csv");
    let set = format!("predictions_path={}", predictions.display());
    run_ok(&[
        "calibrate",
        "--config",
        FIXTURE,
        "--set",
        "predictor=import",
        "--set",
        &set,
        "--out",
        imported.path().to_str().unwrap(),
    ]);
    assert_eq!(fs::read(imported.path().join("calibration_coords_0.csv")).unwrap(), knn);
}

#[test]
fn synthetic_output_feeds_back_as_a_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["synth", "--config", FIXTURE, "--out", out]);
    run_ok(&["sweep", "--config", FIXTURE, "--out", out]);
    let from_synth = fs::read(dir.path().join("sweep_coords_0.csv")).unwrap();

    // Same records loaded from the written file give the same sweep.
    let file_cfg = dir.path().join("file.conf");
    fs::write(
        &file_cfg,
        "dataset_path = synthetic_0.csv\nsplit = 0.5,0.25,0.25\nknn_k = 5\nalphas = table\nout = from_file\n",
    )
    .unwrap();
    run_ok(&["sweep", "--config", file_cfg.to_str().unwrap()]);
    let from_file = fs::read(dir.path().join("from_file/sweep_coords_0.csv")).unwrap();
    assert_eq!(from_synth, from_file);

    // Risk calibration from the route files written by `synth`.
    let risk_cfg = dir.path().join("risk.conf");
    fs::write(
        &risk_cfg,
        "synthetic = true\nsynth_num_samples = 200\nsplit = 0.5,0.25,0.25\nbetas = 0.05,0.1,0.2\n\
         cal_paths_path = routes_cal_0.csv\ntest_paths_path = routes_test_0.csv\nout = from_routes\n",
    )
    .unwrap();
    run_ok(&["risk", "--config", risk_cfg.to_str().unwrap()]);
    run_ok(&["risk", "--config", FIXTURE, "--out", out]);
    assert_eq!(
        fs::read(dir.path().join("from_routes/risk_fdr_0.csv")).unwrap(),
        fs::read(dir.path().join("risk_fdr_0.csv")).unwrap()
    );
}

#[test]
fn multi_trial_sweep_writes_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "sweep",
        "--config",
        FIXTURE,
        "--set",
        "trials=3",
        "--set",
        "alphas=0.1,0.2",
        "--set",
        "report_format=json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let rows = fs::read_to_string(dir.path().join("sweep_coords_0.json")).unwrap();
    assert_eq!(rows.matches("\"alpha\"").count(), 6);
    let agg = fs::read_to_string(dir.path().join("sweep_aggregate_coords_0.json")).unwrap();
    assert_eq!(agg.matches("\"trials\":3").count(), 2);
}

#[test]
fn pvalue_filter_retains_exactly_p_above_alpha() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "pvalue-filter",
        "--config",
        FIXTURE,
        "--set",
        "pvalue_alpha=0.3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let text = fs::read_to_string(dir.path().join("pvalue_coords_0.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ID,SCORE,PVALUE,RETAINED"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let p: f64 = f[2].parse().unwrap();
        assert_eq!(f[3] == "1", p > 0.3, "{line}");
    }
}
