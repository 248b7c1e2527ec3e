use std::fs;
use std::process::{Command, Output};

fn pushflow(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pushflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
name = "small"
output_dir = "out/small"
n_ref = 200
n_sim = 200
snapshot_every = 2

[forward.linear]
matrix = [[2.0, 0.0], [0.0, 0.75]]

[truth.gaussian]
mean = [0.0, 0.0]
cov = [[1.0, 0.0], [0.0, 1.0]]

[init.independent]
marginals = [{ uniform = { lo = -2.0, hi = 2.0 } }, { uniform = { lo = -2.0, hi = 2.0 } }]

[flow]
dt = 0.05
n_iters = 5
seed = 9

[thresholds]
w2_data = 10.0
"#;

#[test]
fn lists_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pushflow(&["presets"], tmp.path());
    assert!(o.status.success());
    let names = stdout(&o);
    for n in ["linear-full", "linear-under", "linear-over", "linear-chi2", "elliptic1d-s1", "elliptic1d-s2", "elliptic2d"] {
        assert!(names.lines().any(|l| l == n), "{n} missing");
    }
}

#[test]
fn run_writes_the_documented_files() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let o = pushflow(&["run", "small.toml"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("w2_data: pass"));
    let out = tmp.path().join("out/small");
    for f in [
        "config.toml",
        "truth_params.csv",
        "reference_data.csv",
        "energy.csv",
        "params_00000.csv",
        "params_00002.csv",
        "params_00005.csv",
        "data_00005.csv",
        "params_final.csv",
        "data_final.csv",
        "report.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let energy = fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(energy.lines().next(), Some("iter,energy"));
    assert_eq!(energy.lines().count(), 7);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["case"], "fully");
    assert!(report["verdicts"]["w2_data"]["pass"].as_bool().unwrap());
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pushflow(&["gradcheck", "linear", "--matrix", "1,2;3,-4", "--u", "-1,0.5"], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("max relative error"));
    // A huge step spoils the nonlinear finite differences.
    let o = pushflow(&["gradcheck", "elliptic1d", "--h", "1.5"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = pushflow(&["gradcheck", "nonsense"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn theory_gd_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pushflow(&["theory", "gd", "linear-under"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((report["metrics"]["limit_0"].as_f64().unwrap() - 0.438356).abs() < 1e-6);
    assert!((report["metrics"]["limit_1"].as_f64().unwrap() - 0.164384).abs() < 1e-6);
    let o = pushflow(&["theory", "over", "linear-under"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_input_and_numerical_failure_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), SMALL.replace("n_ref = 200", "n_ref = 200\nbogus = 1")).unwrap();
    assert_eq!(pushflow(&["run", "bad.toml"], tmp.path()).status.code(), Some(2));
    assert_eq!(pushflow(&["run", "missing.toml"], tmp.path()).status.code(), Some(2));
    // A weight step this large drives some weights negative.
    let wild = SMALL.replace("dt = 0.05", "dt = 5.0\ndivergence = \"chi2\"");
    fs::write(tmp.path().join("wild.toml"), wild).unwrap();
    let o = pushflow(&["run", "wild.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn thread_override_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pushflow"))
        .arg("presets")
        .env("PUSHFLOW_THREADS", "many")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
