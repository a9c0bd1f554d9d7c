use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn sdfwd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdfwd"))
        .args(args)
        .env("FWD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn run_in(cmd: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    sdfwd(&args)
}

fn error_record(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().unwrap_or_else(|| panic!("no stderr"));
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {err}"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn certify_first_chain_stage_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("certify", &scenario("stage1_certificate.toml"), tmp.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let certs: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("certificates.json")).unwrap()).unwrap();
    let stage = &certs[0];
    assert_eq!(stage["stage"], 1);
    let list = stage["certificates"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    assert!(list.iter().all(|c| c["pass"] == true && c["margin"].as_f64().unwrap() > 0.0));
}

#[test]
fn uncertified_stage_exits_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(
        tmp.path(),
        "s.toml",
        "system.name = \"chain3\"\ncontroller.kind = \"chain3_tuned\"\ncertify.stages = [2]\ncertify.grid = \"angular=16,radial=4,quasi_random=200\"\n",
    );
    let o = run_in("certify", &sc, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_record(&o)["kind"], "certificate_failed");
    // the certificates are still written for inspection
    assert!(tmp.path().join("out/certificates.json").exists());
}

#[test]
fn simulate_sine_schedule_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("simulate", &scenario("sine_schedule.toml"), tmp.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x1,x2,x3,u,sampled"));
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    // runs to the first sampling instant at or past the horizon
    assert!(last[0] >= 100.0 && last[0] <= 100.2, "{last:?}");
    assert!(last[1..4].iter().all(|x| x.abs() < 1e-2), "{last:?}");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("stability_report.json")).unwrap()).unwrap();
    assert!(report["decay_rate_mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn identical_seed_gives_byte_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario("cascade.toml");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = run_in("simulate", &sc, dir, &["--horizon", "20", "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory_0.csv", "trajectory_1.csv", "stability_report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("trajectory_0.csv")).unwrap(), fs::read(c.join("trajectory_0.csv")).unwrap());
}

#[test]
fn validation_errors_are_line_anchored_records() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(
        tmp.path(),
        "bad.toml",
        "system.name = \"chain3\"\ncontroller.kind = \"chain3_tuned\"\nschedule.r = -1.0\nschedule.horizon = 10.0\ninitial.x0 = [1.0, 1.0, 1.0]\n",
    );
    let o = run_in("simulate", &sc, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let rec = error_record(&o);
    assert_eq!(rec["kind"], "validation");
    assert_eq!(rec["line"], 3);
    assert_eq!(rec["exit_code"], 2);
    assert!(!tmp.path().join("out").exists());

    let o = run_in("simulate", &scenario("sine_schedule.toml"), &tmp.path().join("out"), &["--step", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_and_io_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(
        tmp.path(),
        "up.toml",
        "system.name = \"scalar_chain\"\ncontroller.kind = \"linear\"\ncontroller.gain = [1.0]\nschedule.r = 0.1\nschedule.horizon = 100.0\ninitial.x0 = [1.0]\n",
    );
    let o = run_in("simulate", &sc, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["kind"], "divergence");

    let o = run_in("simulate", &tmp.path().join("missing.toml"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(5));
    // output "directory" that is a regular file
    let blocker = write(tmp.path(), "blocker", "");
    let o = run_in("simulate", &sc, &blocker.join("sub"), &[]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_record(&o)["kind"], "io");
}

#[test]
fn synthesized_schedule_feeds_certify() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("synthesize", &scenario("synthesize_chain3.toml"), &tmp.path().join("design"), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 2);
    let sc = write(
        tmp.path(),
        "cert.toml",
        "system.name = \"chain3\"\ncontroller.kind = \"file\"\ncontroller.path = \"design/gain_schedule.json\"\n",
    );
    let o = run_in(
        "certify",
        &sc,
        &tmp.path().join("cert"),
        &["--grid", "angular=32,radial=8,slab=5,quasi_random=2000"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn masp_on_saturated_integrator() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("masp", &scenario("saturated_integrator.toml"), tmp.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("masp.json")).unwrap()).unwrap();
    let r = m["r"].as_f64().unwrap();
    assert!((1.0..2.0).contains(&r), "{r}");
    assert_eq!(m["combinations"], 5 * 4);
}

#[test]
fn delayed_and_report_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("delayed", &scenario("delayed.toml"), &tmp.path().join("d"), &["--horizon", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["max_prediction_error"].as_f64().unwrap() < 1e-6);
    let pred = fs::read_to_string(tmp.path().join("d/predictions.csv")).unwrap();
    assert!(pred.starts_with("tau_i,X1,X2,X3,x1_true,x2_true,x3_true\n"));

    let o = run_in("report", &scenario("sine_schedule.toml"), &tmp.path().join("r"), &["--horizon", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let states = fs::read_to_string(tmp.path().join("r/report_states.csv")).unwrap();
    let input = fs::read_to_string(tmp.path().join("r/report_input.csv")).unwrap();
    assert!(states.starts_with("t,x1,x2,x3\n") && input.starts_with("t,u\n"));
    assert_eq!(states.lines().count(), input.lines().count());
}

#[test]
fn check_prints_canonical_document() {
    let o = sdfwd(&["check", "--scenario", scenario("delayed.toml").to_str().unwrap()]);
    assert!(o.status.success());
    let doc = String::from_utf8(o.stdout).unwrap();
    assert!(doc.contains("delays.T = 0.2\n") && doc.contains("system.name = \"chain3\"\n"), "{doc}");
}
