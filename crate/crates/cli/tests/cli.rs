use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bmtraj::synthgen::{sphere_mask_series, SphereLesion};
use bmtraj::track::Geometry;
use tempfile::TempDir;

fn bmtraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmtraj")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bmtraj(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("synth");
    ok(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    out
}

fn features(dir: &Path, synth: &Path) -> PathBuf {
    let out = dir.join("features");
    ok(&[
        "features",
        "--trajectories",
        p(&synth.join("trajectories.csv")),
        "--clinical",
        p(&synth.join("clinical.csv")),
        "--out",
        p(&out),
    ]);
    out
}

#[test]
fn version_and_help_exit_zero() {
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("config schema 1"));
    ok(&["--help"]);
}

#[test]
fn exit_codes_and_error_envelope() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = bmtraj(&["classify", "--trajectories", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("classify: "), "{err}");
    assert!(err.contains("nope.csv"), "{err}");

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "patient_id,lesion_id,day,volume_mm3\nP1,L1,0,-5\n").unwrap();
    let out = bmtraj(&["classify", "--trajectories", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("classify: "));

    assert_eq!(bmtraj(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bmtraj(&["evaluate", "--method", "svm", "--features", p(tmp.path())]).status.code(), Some(1));
    assert_eq!(bmtraj(&["synth", "--n", "50"]).status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 3, "sede": 4}"#).unwrap();
    let out = bmtraj(&["--config", p(&cfg), "synth", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    fs::write(&cfg, r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(bmtraj(&["--config", p(&cfg), "synth", "--out", p(tmp.path())]).status.code(), Some(1));
}

#[test]
fn echoed_config_reproduces_stage_output() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), 40, 5);
    let first = tmp.path().join("c1");
    ok(&["classify", "--trajectories", p(&s.join("trajectories.csv")), "--method", "linear", "--out", p(&first)]);
    let second = tmp.path().join("c2");
    ok(&["--config", p(&first.join("classify_config.json")), "classify", "--out", p(&second)]);
    assert_eq!(fs::read(first.join("categories.csv")).unwrap(), fs::read(second.join("categories.csv")).unwrap());

    let again = tmp.path().join("synth2");
    ok(&["--config", p(&s.join("synth_config.json")), "synth", "--out", p(&again)]);
    for f in ["trajectories.csv", "clinical.csv", "labels.csv"] {
        assert_eq!(fs::read(s.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn classify_writes_six_categories_per_lesion() {
    let tmp = TempDir::new().unwrap();
    let traj = tmp.path().join("t.csv");
    fs::write(
        &traj,
        "patient_id,lesion_id,day,volume_mm3\n\
         P1,L1,0,100\nP1,L1,60,0\nP1,L1,120,0\nP1,L1,180,0\nP1,L1,240,0\nP1,L1,300,0\nP1,L1,360,0\n\
         P1,L2,0,100\nP1,L2,60,50\nP1,L2,120,120\nP1,L2,180,120\nP1,L2,240,120\nP1,L2,300,120\nP1,L2,360,30\n",
    )
    .unwrap();
    ok(&["classify", "--trajectories", p(&traj), "--out", p(tmp.path())]);
    let text = fs::read_to_string(tmp.path().join("categories.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "patient_id,lesion_id,t1,t2,t3,t4,t5,t6");
    assert_eq!(lines[1], "P1,L1,CR,CR,CR,CR,CR,CR");
    assert_eq!(lines[2], "P1,L2,SD,PD,PD,PD,PD,PR");
}

#[test]
fn general_model_is_evaluated_at_every_horizon() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), 60, 2);
    let f = features(tmp.path(), &s);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"protocol": {"n_boot": 50, "n_perm": 50, "gat": {"max_epochs": 40}}}"#).unwrap();
    let out = tmp.path().join("eval");
    ok(&["--config", p(&cfg), "evaluate", "--features", p(&f), "--method", "gat-general", "--out", p(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("evaluation.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "GAT_GENERAL");
    let horizons: Vec<u64> = rows[0]["cells"].as_array().unwrap().iter().map(|c| c["horizon"].as_u64().unwrap()).collect();
    assert_eq!(horizons, vec![0, 1, 2, 3, 4, 5]);
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 6 * 60);
}

#[test]
fn track_reads_mask_series() {
    let tmp = TempDir::new().unwrap();
    let series = tmp.path().join("series");
    fs::create_dir(&series).unwrap();
    let g = Geometry { dims: [24, 24, 12], spacing_mm: [1.0, 1.0, 2.0], origin_mm: [0.0; 3] };
    let days = [0, 60, 120];
    let spheres = [
        SphereLesion { center_mm: [6.0, 6.0, 10.0], radii_mm: vec![3.0, 2.0, 0.0] },
        SphereLesion { center_mm: [17.0, 17.0, 10.0], radii_mm: vec![3.0, 3.0, 4.0] },
    ];
    for (day, vol) in sphere_mask_series(&g, &days, &spheres).unwrap() {
        vol.write(&series.join(format!("{day}.raw")), &series.join(format!("{day}.json"))).unwrap();
    }
    let out = tmp.path().join("out");
    ok(&["track", "--series", p(&series), "--patient", "P9", "--out", p(&out)]);
    let text = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.starts_with("P9,")));
    assert!(out.join("new_lesions.csv").exists() && out.join("tracking_decisions.txt").exists());
}

#[test]
fn report_bundle_is_deterministic() {
    let run = |dir: &Path| {
        let s = synth(dir, 80, 13);
        let f = features(dir, &s);
        let e = dir.join("eval");
        ok(&["evaluate", "--features", p(&f), "--seed", "13", "--out", p(&e)]);
        let r = dir.join("report");
        ok(&[
            "report",
            "--trajectories",
            p(&s.join("trajectories.csv")),
            "--evaluation",
            p(&e.join("evaluation.json")),
            "--seed",
            "13",
            "--out",
            p(&r),
        ]);
        fs::read(r.join("report.json")).unwrap()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    let bundle: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(bundle["n_lesions"], 80);
    assert_eq!(bundle["flows"].as_array().unwrap().len(), 5);
}
