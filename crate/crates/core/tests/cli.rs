use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfeq::io::{csv_body, Table};

const SCALAR: &str = r#"{"n":1,"m":1,"horizon":1.0,"steps":40,"x0":1.0,
  "B":[[1.0]],"D":[[1.0]],"A_tilde":[[0.1]],"B_tilde":[[0.1]],"C_tilde":[[0.1]],"D_tilde":[[0.1]],
  "Q":[[1.0]],"R":[[1.0]],"G":[[1.0]]}"#;

fn mfeq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfeq")).args(args).output().unwrap()
}

fn write_problem(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn run(cmd: &str, problem: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--problem", problem.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mfeq(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(t: &Table, name: &str) -> Vec<f64> {
    let c = t.column(name).unwrap_or_else(|| panic!("no column {name}"));
    t.rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

#[test]
fn solve_writes_gains_matching_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    let out = dir.path().join("out");
    let o = run("solve", &p, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let gains = Table::read(&out.join("gains.csv")).unwrap();
    let spec = mfeq::model::ProblemSpec::from_json_str(SCALAR).unwrap();
    let eq = mfeq::riccati::solve_equilibrium_system(&spec).unwrap();
    assert_eq!(column(&gains, "Theta_1_1")[0], eq.law.theta[0][(0, 0)]);
    assert_eq!(column(&gains, "time")[0], 0.0);
    assert_eq!(gains.rows.len(), 41);
    let riccati = Table::read(&out.join("riccati.csv")).unwrap();
    assert!(column(&riccati, "margin").iter().all(|m| *m > 0.0));
    assert!(column(&riccati, "range_theta").iter().all(|f| *f == 1.0));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config"]["command"], "solve");
}

#[test]
fn zero_problem_has_zero_gains() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "zero.json", r#"{"n":2,"m":1,"horizon":1.0,"steps":8}"#);
    let out = dir.path().join("out");
    assert_eq!(run("solve", &p, &out, &[]).status.code(), Some(0));
    let gains = Table::read(&out.join("gains.csv")).unwrap();
    for name in ["Theta_1_1", "Theta_1_2", "phi_1"] {
        assert!(column(&gains, name).iter().all(|x| *x == 0.0));
    }
}

#[test]
fn malformed_files_exit_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let asym = write_problem(dir.path(), "asym.json", r#"{"n":1,"m":2,"horizon":1.0,"steps":4,"R":[[1.0,0.5],[0.0,1.0]]}"#);
    let o = run("solve", &asym, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field R"), "{}", stderr(&o));

    let shape = write_problem(dir.path(), "shape.json", r#"{"n":2,"m":1,"horizon":1.0,"steps":4,"B":[[1.0,2.0]]}"#);
    let o = run("solve", &shape, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field B"), "{}", stderr(&o));

    let missing = write_problem(dir.path(), "missing.json", r#"{"n":1,"m":1,"steps":4}"#);
    let o = run("solve", &missing, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));

    let wrong = write_problem(dir.path(), "wrong.json", r#"{"n":1,"m":1,"horizon":1.0,"steps":4,"sigma":{"x":1}}"#);
    let o = run("solve", &wrong, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field sigma"), "{}", stderr(&o));

    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    assert_eq!(run("simulate", &p, &out, &["--eps", "0.05,0.1"]).status.code(), Some(2));
    assert_eq!(run("simulate", &p, &out, &["--eps", "0.03"]).status.code(), Some(2));
    assert_eq!(run("simulate", &p, &out, &["--inner", "1"]).status.code(), Some(2));
    assert_eq!(mfeq(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--outer", "4", "--inner", "256"];

    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    let out = dir.path().join("ok");
    let o = run("verify", &p, &out, &small);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    assert!(cert["first_failure"].is_null());
    assert!(out.join("summary.csv").exists() && out.join("spike.csv").exists());

    let bad = write_problem(dir.path(), "bad.json", r#"{"n":1,"m":1,"horizon":1.0,"steps":8,"R":[[-2.0]],"D":[[1.0]],"G":[[-1.0]]}"#);
    let o = run("verify", &bad, &dir.path().join("bad"), &small);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("second-order condition"), "{}", stderr(&o));

    // control enters nowhere and costs nothing: every check holds, W = 0
    let h2 = write_problem(dir.path(), "h2.json", r#"{"n":1,"m":1,"horizon":1.0,"steps":8,"x0":1.0,"G":[[1.0]],"sigma":[0.2]}"#);
    let o = run("verify", &h2, &dir.path().join("h2"), &["--no-spike", "--uniqueness", "--depths", "4"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("not checkable"), "{}", stderr(&o));
    let o = run("verify", &h2, &dir.path().join("h2b"), &["--no-spike"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn oracle_compare_tables() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_problem(dir.path(), "zero.json", r#"{"n":1,"m":1,"horizon":1.0,"steps":8}"#);
    let out = dir.path().join("zero");
    let o = run("oracle-compare", &zero, &out, &["--depths", "4,6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = Table::read(&out.join("oracle.csv")).unwrap();
    for c in t.columns.iter().skip(1) {
        assert!(column(&t, c).iter().all(|x| *x == 0.0), "{c}");
    }

    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    let out = dir.path().join("scalar");
    let o = run("oracle-compare", &p, &out, &["--depths", "6,8,10", "--paths", "4000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = Table::read(&out.join("oracle.csv")).unwrap();
    let gaps = column(&t, "gain_gap_rel");
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(column(&t, "cost_z").iter().all(|z| z.abs() <= 3.0));
    assert!(column(&t, "tree_spike_min").iter().all(|d| *d >= -1e-10));
}

#[test]
fn identical_runs_give_identical_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    let extra = ["--paths", "300", "--outer", "4", "--inner", "128", "--seed", "99"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("simulate", &p, &a, &extra).status.code(), Some(0));
    assert_eq!(run("simulate", &p, &b, &extra).status.code(), Some(0));
    for f in ["ensemble.csv", "spike.csv"] {
        let ta = fs::read_to_string(a.join(f)).unwrap();
        let tb = fs::read_to_string(b.join(f)).unwrap();
        assert!(ta.starts_with("# mfeq"));
        assert_eq!(csv_body(&ta), csv_body(&tb), "{f}");
    }
    let c = dir.path().join("c");
    assert_eq!(run("simulate", &p, &c, &["--paths", "300", "--no-spike", "--seed", "100"]).status.code(), Some(0));
    assert_ne!(csv_body(&fs::read_to_string(a.join("ensemble.csv")).unwrap()), csv_body(&fs::read_to_string(c.join("ensemble.csv")).unwrap()));
}

#[test]
fn export_writes_plotting_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "scalar.json", SCALAR);
    let out = dir.path().join("x");
    assert_eq!(run("export", &p, &out, &["--steps", "10"]).status.code(), Some(0));
    let coeffs = Table::read(&out.join("coefficients.csv")).unwrap();
    assert_eq!(coeffs.rows.len(), 10);
    assert_eq!(column(&coeffs, "B_1_1")[0], 1.0);
    let series = Table::read(&out.join("series.csv")).unwrap();
    assert_eq!(series.columns, ["series", "time", "value"]);
    let back = mfeq::model::ProblemSpec::from_json_file(&out.join("problem.json")).unwrap();
    assert_eq!(back.grid.steps(), 10);
}
