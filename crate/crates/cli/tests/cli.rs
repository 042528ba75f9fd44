use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cvshare(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvshare"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("CVSHARE_OUT")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn bounds_writes_one_row_per_r_and_coalition() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvshare(
        dir.path(),
        &["bounds", "--r-min", "0", "--r-max", "1.5", "--steps", "16"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("r,coalition,mse_x,mse_p,mse_sum"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 16 * 4);
    for row in &rows {
        let r: f64 = row[0].parse().unwrap();
        let sum: f64 = row[4].parse().unwrap();
        // Ideal channel: closed-form coalition curves.
        let expected = match row[1].as_str() {
            "A_alone" => 4.0 + 4.0 * r.sinh().powi(2),
            "AB" | "AC" => 4.0,
            "ABC" => 8.0 / ((2.0 * r).exp() + (-2.0 * r).exp()),
            other => panic!("unexpected coalition {other}"),
        };
        assert!((sum - expected).abs() < 1e-9, "{row:?}");
    }
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "bounds");
    assert_eq!(manifest["outputs"], serde_json::json!(["bounds.csv"]));
}

#[test]
fn certify_grid_reports_25_verified_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvshare(dir.path(), &["certify", "--grid", "5"]);
    assert!(out.status.success());
    let reports = read_json(&dir.path().join("certificates.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 25);
    for r in reports {
        assert_eq!(r["status"], "verified");
        let bound = 4.0 + 2.0 * r["n1"].as_f64().unwrap() + 2.0 * r["n2"].as_f64().unwrap();
        assert!((r["primal_value"].as_f64().unwrap() - bound).abs() < 1e-9);
        assert!((r["dual_value"].as_f64().unwrap() - bound).abs() < 1e-9);
    }
}

#[test]
fn simulate_without_config_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvshare(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cvshare(
        dir.path(),
        &[
            "simulate",
            "--config",
            dir.path().join("missing.cfg").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"], "usage");
}

#[test]
fn malformed_config_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "r = 1\nunknown_key = 3\n").unwrap();
    let out = cvshare(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["message"]
        .as_str()
        .unwrap()
        .contains("unknown_key"));

    assert_eq!(
        cvshare(dir.path(), &["bounds", "--steps", "many"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cvshare(dir.path(), &["state", "--r", "-1"]).status.code(),
        Some(2)
    );
    assert_eq!(cvshare(dir.path(), &["teleport"]).status.code(), Some(2));
}

#[test]
fn aborted_protocol_exits_1_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lossy.cfg");
    fs::write(&cfg, "# A's arm too lossy\nr = 1\neta_a = 0.3\n").unwrap();
    let out = cvshare(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_error(&out);
    assert_eq!(err["error"], "abort-loss");
    assert!(err["message"].is_string());
}

#[test]
fn simulate_outputs_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "r = 0.8\neta_a = 0.9\neps_c = 0.01\nplan = gaussian\nv_dist = 3\ncoalition = ABC\nn_rounds = 20000\nseed = 9\nwitness_fraction = 0.1\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = cvshare(
            d,
            &[
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--dump-rounds",
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["report.json", "witness.json", "rounds.csv", "manifest.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let report = read_json(&a.join("report.json"));
    assert_eq!(report["report"]["coalition"], "ABC");
    let (sum, se, pred) = (
        report["report"]["mse_sum"].as_f64().unwrap(),
        report["mse_sum_se"].as_f64().unwrap(),
        report["predicted_mse_sum"].as_f64().unwrap(),
    );
    assert!((sum - pred).abs() < 5.0 * se, "{sum} vs {pred} (se {se})");
    assert_eq!(read_json(&a.join("witness.json"))["entangled"], true);

    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["resolved"]["seed"], 9);
    assert_eq!(manifest["argv"][0], "simulate");
    assert!(!manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "--out"));
}

#[test]
fn replaying_a_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = cvshare(
        &first,
        &["witness", "--r", "0.5", "--n-rounds", "5000", "--seed", "4"],
    );
    assert!(out.status.success());
    let manifest = read_json(&first.join("manifest.json"));
    let argv: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let second = dir.path().join("second");
    assert!(cvshare(&second, &argv).status.success());
    for f in ["witness.json", "manifest.json"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap()
        );
    }
}

#[test]
fn output_directory_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_cvshare"))
        .args(["state", "--r", "0.5", "--party", "A"])
        .env("CVSHARE_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = fs::read_to_string(target.join("state.txt")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("1"));
    let v: f64 = lines
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((v - 1.0f64.cosh()).abs() < 1e-12);
}

#[test]
fn security_and_mi_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvshare(
        dir.path(),
        &["security", "--n-probes", "10", "--n-max", "20"],
    );
    assert!(out.status.success());
    let reports = read_json(&dir.path().join("security.json"));
    let abc = &reports[1];
    assert_eq!(abc["coalition"], "ABC");
    let v_t = abc["v_t"].as_f64().unwrap();
    assert!((v_t - 8.0 * 2f64.ln()).abs() < 1e-12);
    let sweep = fs::read_to_string(dir.path().join("security_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 20 * 2);

    let out = cvshare(dir.path(), &["security", "--v-t", "6.0", "--n-max", "3"]);
    assert!(out.status.success());
    let reports = read_json(&dir.path().join("security.json"));
    assert_eq!(reports[0]["v_t"], 6.0);
    assert_eq!(reports[1]["v_t"], 6.0);

    let out = cvshare(
        dir.path(),
        &["mi", "--v-dist", "4", "--c-bits", "1", "--n-max", "50"],
    );
    assert!(out.status.success());
    let exceed = fs::read_to_string(dir.path().join("mi_exceedance.csv")).unwrap();
    assert_eq!(
        exceed.lines().next(),
        Some("n_probes,coalition,mu,probability")
    );
    assert_eq!(exceed.lines().count(), 1 + 50 * 3);
    let mi = fs::read_to_string(dir.path().join("mi_vs_mse.csv")).unwrap();
    // v_alpha = V_dist sits at the middle of the grid and carries one bit.
    let mid: Vec<f64> = mi
        .lines()
        .nth(41)
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert!((mid[0] - 4.0).abs() < 1e-9 && (mid[1] - 1.0).abs() < 1e-9);
}
