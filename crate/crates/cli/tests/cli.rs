use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctbn_meanfield::io;
use ctbn_meanfield::model::build_ising_chain;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctbn-mf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON on stdout")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TWO_STATE: &str = r#"{"components":[{"name":"A","states":["0","1"],"parents":[],"rates":{"":[[-1,1],[1,-1]]}}]}"#;
const TWO_STATE_EV: &str = r#"{"T":1,"components":[{"start":"0","end":"0"}]}"#;

#[test]
fn validate_accepts_clean_ising_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ising.json");
    io::write_model(&path, &build_ising_chain(4, 1.0, 2.0).unwrap()).unwrap();
    let out = run(&["validate", "--model", s(&path)]);
    assert_eq!(code(&out), 0);
}

#[test]
fn validate_rejects_bad_row_sum() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "bad.json", &TWO_STATE.replace("[-1,1]", "[-1,0.5]"));
    let out = run(&["validate", "--model", s(&path)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("row 0 sums to -0.5"));
}

#[test]
fn validate_rejects_missing_instantiation() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"components":[
        {"name":"A","states":["0","1"],"rates":{"":[[-1,1],[1,-1]]}},
        {"name":"B","states":["0","1"],"parents":["A"],"rates":{"0":[[-1,1],[1,-1]]}}]}"#;
    let path = write(dir.path(), "missing.json", text);
    assert_eq!(code(&run(&["validate", "--model", s(&path)])), 1);
}

#[test]
fn exact_two_state_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", TWO_STATE);
    let e = write(dir.path(), "e.json", TWO_STATE_EV);
    let v = stdout_json(&run(&["exact", "--model", s(&m), "--evidence", s(&e)]));
    let lnp = v["log_likelihood"].as_f64().unwrap();
    // P(X_1 = 0 | X_0 = 0) = (1 + e^{-2}) / 2 for the symmetric unit-rate chain
    let expected = ((1.0 + (-2.0f64).exp()) / 2.0).ln();
    assert!((lnp - expected).abs() < 1e-9, "{lnp} vs {expected}");
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn oversized_model_exits_with_cap_error() {
    let out = run(&["exact", "--D", "13", "--start", "+++++++++++++", "--end", "-------------"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("state space too large"));
}

#[test]
fn zero_probability_evidence_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let frozen = r#"{"components":[{"name":"A","states":["0","1"],"rates":{"":[[0,0],[0,0]]}}]}"#;
    let m = write(dir.path(), "m.json", frozen);
    let e = write(dir.path(), "e.json", r#"{"T":1,"components":[{"start":"0","end":"1"}]}"#);
    assert_eq!(code(&run(&["exact", "--model", s(&m), "--evidence", s(&e)])), 3);
}

#[test]
fn exact_and_meanfield_reports_feed_compare() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let common = ["--D", "3", "--beta", "1", "--tau", "2", "--start", "+-+", "--end", "-+-", "--T", "0.5", "--out", s(&out)];
    assert!(run(&[&["exact"][..], &common].concat()).status.success());
    let text = std::fs::read_to_string(out.join("exact.json")).unwrap();
    let exact: Value = serde_json::from_str(&text).unwrap();
    assert!(run(&[&["meanfield", "--rtol", "1e-8", "--atol", "1e-12"][..], &common].concat()).status.success());
    let cmp = stdout_json(&run(&[
        "compare",
        "--exact",
        s(&out.join("exact.json")),
        "--meanfield",
        s(&out.join("meanfield.json")),
    ]));
    assert_eq!(cmp["log_likelihood"], exact["log_likelihood"]);
    assert_eq!(cmp["bound_holds"], true);
    assert!(cmp["gap"].as_f64().unwrap() >= -1e-5);
    assert!(cmp["max_marginal_error"].as_f64().is_some());
    // re-serializing the parsed report gives the same bytes
    let reparsed: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(reparsed, exact);
}

#[test]
fn single_component_meanfield_matches_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", TWO_STATE);
    let e = write(dir.path(), "e.json", TWO_STATE_EV);
    let v = stdout_json(&run(&["meanfield", "--model", s(&m), "--evidence", s(&e), "--compare-exact"]));
    let gap = v["exact"]["gap"].as_f64().unwrap();
    assert!(gap.abs() <= 1e-4, "gap {gap}");
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &Path| {
        vec![
            "meanfield".to_string(),
            "--D".into(),
            "4".into(),
            "--beta".into(),
            "2".into(),
            "--tau".into(),
            "2".into(),
            "--start".into(),
            "++--".into(),
            "--end".into(),
            "--++".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            s(o).into(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(bin().args(args(&a)).status().unwrap().success());
    assert!(bin().args(args(&b)).status().unwrap().success());
    for f in ["meanfield.json", "trace.csv", "density.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn one_sweep_still_writes_valid_output() {
    let v = stdout_json(&run(&[
        "meanfield", "--D", "4", "--beta", "2", "--tau", "4", "--start", "++--", "--end", "--++", "--max-sweeps", "1",
    ]));
    assert_eq!(v["sweeps"], 1);
    assert!(v["converged"].is_boolean());
    assert!(v["free_energy"].as_f64().unwrap().is_finite());
}

#[test]
fn sweep_beta_zero_column_is_exact() {
    let out = run(&[
        "sweep", "--D", "4", "--beta", "0", "--tau", "1,4", "--start", "++--", "--end", "-++-", "--T", "0.64", "--jobs", "2",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "schema_version");
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r[col("status")], "ok");
        let err: f64 = r[col("relative_error_sum")].parse().unwrap();
        assert!(err <= 1e-3, "relative error {err}");
        assert_eq!(r[col("bound_holds")], "true");
    }
}

#[test]
fn plotdata_header_and_frozen_run() {
    let dir = tempfile::tempdir().unwrap();
    let frozen = r#"{"components":[{"name":"A","states":["0","1"],"rates":{"":[[0,0],[0,0]]}}]}"#;
    let m = write(dir.path(), "m.json", frozen);
    let e = write(dir.path(), "e.json", r#"{"T":2,"components":[{"start":"1","end":null}]}"#);
    let out = dir.path().join("run");
    assert!(run(&["meanfield", "--model", s(&m), "--evidence", s(&e), "--out", s(&out)]).status.success());
    let plot = run(&["plotdata", "--density", s(&out.join("density.json"))]);
    assert!(plot.status.success());
    let text = String::from_utf8(plot.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "schema_version,t,component,state,mu,log_rho_ratio");
    let mut n = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let mu: f64 = f[4].parse().unwrap();
        assert_eq!(mu, if f[3] == "1" { 1.0 } else { 0.0 });
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn plotdata_two_component_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = run(&[
        "meanfield", "--D", "2", "--beta", "4", "--tau", "2", "--start", "+-", "--end", "-+", "--T", "1", "--out", s(&out),
    ]);
    assert!(r.status.success());
    let plot = run(&["plotdata", "--density", s(&out.join("density.json"))]);
    let text = String::from_utf8(plot.stdout).unwrap();
    let comps: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(comps.into_iter().collect::<Vec<_>>(), vec!["X0", "X1"]);
    // log ratio of the first state against itself is zero wherever defined
    for l in text.lines().skip(1).filter(|l| l.split(',').nth(3) == Some("-1")) {
        let f = l.split(',').nth(5).unwrap();
        if !f.is_empty() {
            assert_eq!(f.parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn path_tree_matches_interval_run() {
    let dir = tempfile::tempdir().unwrap();
    let tree = r#"{"vertices":["r","m","leaf"],"root":"r",
        "branches":[{"from":"r","to":"m","length":0.3},{"from":"m","to":"leaf","length":0.34}],
        "evidence":{"root":["+1","-1","+1"],"observations":{"leaf":["-1","+1","+1"]}}}"#;
    let t = write(dir.path(), "tree.json", tree);
    let tight = ["--rtol", "1e-10", "--atol", "1e-14", "--tol", "1e-12"];
    let tv = stdout_json(&run(&[&["tree", "--D", "3", "--tree", s(&t)][..], &tight].concat()));
    let iv = stdout_json(&run(&[
        &["meanfield", "--D", "3", "--start", "+-+", "--end", "-++", "--T", "0.64"][..],
        &tight,
    ]
    .concat()));
    let (a, b) = (tv["free_energy"].as_f64().unwrap(), iv["free_energy"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-7, "{a} vs {b}");
}

#[test]
fn single_component_tree_matches_pruning() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", TWO_STATE);
    let tree = r#"{"vertices":["r","a","L1","L2","L3"],"root":"r",
        "branches":[{"from":"r","to":"a","length":0.4},{"from":"a","to":"L1","length":0.5},
                    {"from":"a","to":"L2","length":0.2},{"from":"r","to":"L3","length":0.7}],
        "evidence":{"root":[{"prior":[0.4,0.6]}],"observations":{"L1":["0"],"L2":["1"],"L3":["0"]}}}"#;
    let t = write(dir.path(), "tree.json", tree);
    let out = dir.path().join("run");
    let r = run(&[
        "tree", "--model", s(&m), "--tree", s(&t), "--compare-exact", "--root-mode", "reweighted", "--rtol", "1e-9", "--atol",
        "1e-13", "--out", s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("tree.json")).unwrap()).unwrap();
    assert!(v["gap"].as_f64().unwrap().abs() < 1e-4, "{}", v["gap"]);
    let csv = std::fs::read_to_string(out.join("backbone.csv")).unwrap();
    for l in csv.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        let (a, e): (f64, f64) = (f[6].parse().unwrap(), f[7].parse().unwrap());
        assert!((a - e).abs() < 1e-4, "{l}");
    }
}
