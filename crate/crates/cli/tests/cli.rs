//! End-to-end tests of the `klift` binary: exit codes, artifact
//! formats, and byte determinism.

use std::path::Path;
use std::process::{Command, Output};

fn klift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klift"))
        .args(args)
        .output()
        .expect("spawn klift")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const VDP_SMALL: &str = r#"{"problem": "vanderpol", "basis": {"count": 15},
  "grid": {"lower": [-0.5, -0.5], "upper": [0.5, 0.5], "points_per_dim": 5}}"#;

#[test]
fn check_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"problem": "vanderpol", "basis": {"count": 5}}"#);
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("structure_report.json")).unwrap())
            .unwrap();
    // serde_json::Value sorts keys on parse, so compare as sorted sets
    let keys: Vec<&str> = report["report"]
        .as_object()
        .unwrap()
        .keys()
        .map(|s| s.as_str())
        .collect();
    let mut expected = vec![
        "symmetry_defect",
        "divergence",
        "monodromy_symplectic_defect",
        "monodromy_det_defect",
        "adjoint_defect",
    ];
    expected.sort_unstable();
    assert_eq!(keys, expected);
    assert!(report["pass"].as_bool().unwrap());
    assert_eq!(report["config_sha256"].as_str().unwrap().len(), 64);
    assert!(report["versions"]["core"].is_string());
}

#[test]
fn missing_problem_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"basis": {"count": 5}}"#);
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "check"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "vanderpol", "basis": {"count": 5}, "extra": true}"#,
    );
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "spectrum"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lqr_spectrum_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "double_integrator_lqr", "basis": {"count": 5}}"#,
    );
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "spectrum"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let rows: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("index"))
        .collect();
    assert_eq!(rows.len(), 5);
    let s3 = 3f64.sqrt();
    let mut matched = 0;
    for &(re, im) in &[(s3 / 2.0, 0.5), (s3 / 2.0, -0.5), (-s3 / 2.0, 0.5), (-s3 / 2.0, -0.5)] {
        for row in &rows {
            let f: Vec<&str> = row.split(',').collect();
            let (r, i): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            if (r - re).abs() < 1e-8 && (i - im).abs() < 1e-8 {
                matched += 1;
                break;
            }
        }
    }
    assert_eq!(matched, 4);
    // the pairing covers the whole quadruple
    let pairing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairing.json")).unwrap())
            .unwrap();
    assert_eq!(pairing["pairs"].as_array().unwrap().len(), 2);
}

#[test]
fn single_constant_basis_has_trivial_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"problem": "vanderpol", "basis": {"count": 1}}"#);
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "spectrum"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairing.json")).unwrap())
            .unwrap();
    assert!(pairing["pairs"].as_array().unwrap().is_empty());
}

#[test]
fn huge_tau_is_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "vanderpol", "basis": {"count": 15},
            "tolerances": {"tau": 1e6}}"#,
    );
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "synthesize"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no unstable eigenvalues"));
}

#[test]
fn synthesize_lqr_recovers_gain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "double_integrator_lqr", "basis": {"count": 5},
            "grid": {"lower": [-0.5, -0.5], "upper": [0.5, 0.5], "points_per_dim": 3}}"#,
    );
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "synthesize"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("feedback_grid.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "x1,x2,u1,lambda1,lambda2,newton_iters,residual"
    );
    // u = -lambda2 = -(x1 + sqrt(3) x2) for the double integrator
    let s3 = 3f64.sqrt();
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let want = -(f[0] + s3 * f[1]);
        assert!((f[2] - want).abs() < 1e-6, "{line}");
    }
    let law: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("law.json")).unwrap())
            .unwrap();
    assert_eq!(law["selected"].as_array().unwrap().len(), 2);
    assert!(law["warm_start_used"].as_bool().unwrap());
}

#[test]
fn simulate_lqr_converges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "double_integrator_lqr", "basis": {"count": 5},
            "initial_states": [[0.5, 0.5], [-0.5, 0.25]], "horizon": 15.0}"#,
    );
    let out = klift(&[
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
        "--threads",
        "2",
        "simulate",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "traj,t,y1,y2");
    let costs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("costs.json")).unwrap())
            .unwrap();
    for r in costs["rollouts"].as_array().unwrap() {
        assert!(r["final_norm"].as_f64().unwrap() < 1e-2);
        assert!(r["converged"].as_bool().unwrap());
    }
}

#[test]
fn compare_without_reference_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"problem": "vanderpol", "basis": {"count": 15}}"#);
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "compare"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped"));
    assert!(!dir.path().join("comparison.json").exists());
}

#[test]
fn compare_reproduction_basis_against_exact_law() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": "vanderpol",
            "basis": {"indices": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]},
            "reference": [{"vars": 2, "terms": [{"exps": [1, 1], "coeff": -1.0}]}]}"#,
    );
    let out = klift(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "compare"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comparison.json")).unwrap())
            .unwrap();
    let l2sq = cmp["report"]["l2sq_error"].as_f64().unwrap();
    assert!(l2sq <= 2e-4, "l2sq_error = {l2sq}");
    assert!(cmp["report"]["failed_nodes"].as_array().unwrap().is_empty());
}

#[test]
fn outputs_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VDP_SMALL);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        for cmd in ["spectrum", "synthesize"] {
            let r = klift(&["--config", &cfg, "--out", out.to_str().unwrap(), cmd]);
            assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        }
    }
    for name in ["spectrum.csv", "pairing.json", "feedback_grid.csv", "law.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
