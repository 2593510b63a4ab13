use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn shiftsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftsim")).current_dir(dir).args(args).output().expect("spawn shiftsim")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

/// Synthetic bundle plus a calibrated world in a fresh directory.
fn calibrated() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&shiftsim(dir.path(), &["synth", "--seed", "2", "--out", "syn"]));
    ok(&shiftsim(dir.path(), &["calibrate", "--data", "syn/data", "--out", "cal"]));
    dir
}

#[test]
fn noop_scenario_gives_an_all_zero_table() {
    let dir = calibrated();
    ok(&shiftsim(dir.path(), &["simulate", "--world", "cal/world.json", "--scenario", r#"{"kind":"noop"}"#, "--out", "sim"]));
    let text = fs::read_to_string(dir.path().join("sim/summary.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    let mut n = 0;
    for row in rows.records() {
        let row = row.unwrap();
        for (name, value) in header.iter().zip(row.iter()).filter(|(h, _)| h.starts_with("d_")) {
            assert_eq!(value.parse::<f64>().unwrap(), 0.0, "{name} in {row:?}");
        }
        n += 1;
    }
    assert_eq!(n, 2);
}

#[test]
fn simulate_is_deterministic_across_thread_counts() {
    let dir = calibrated();
    let cfg = r#"
world = "cal/world.json"
mode = "both"

[[scenarios]]
kind = "min_tax"
rate = 0.15
rights = "residence"
scope = "multilateral"

[[scenarios]]
kind = "min_tax"
rate = 0.15
rights = "source"
scope = { unilateral = 0 }
"#;
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    ok(&shiftsim(dir.path(), &["simulate", "-c", "run.toml", "--threads", "1", "--out", "a"]));
    ok(&shiftsim(dir.path(), &["simulate", "-c", "run.toml", "--threads", "4", "--out", "b"]));
    for f in ["outcomes.csv", "summary.csv", "revenue_decomposition.csv", "welfare_decomposition.csv", "sankey.json"] {
        let (a, b) = (fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn missing_fdi_panel_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    ok(&shiftsim(dir.path(), &["synth", "--seed", "2", "--out", "syn"]));
    fs::remove_file(dir.path().join("syn/data/fdi.csv")).unwrap();
    let o = shiftsim(dir.path(), &["calibrate", "--data", "syn/data", "--out", "cal"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("stage=ps_ih") && err.contains("missing input"), "{err}");
}

#[test]
fn fixed_nest_elasticity_skips_the_iteration() {
    let dir = tempfile::tempdir().unwrap();
    ok(&shiftsim(dir.path(), &["synth", "--seed", "2", "--out", "syn"]));
    ok(&shiftsim(dir.path(), &["calibrate", "--data", "syn/data", "--out", "cal", "--upsilon2-fixed", "52.1"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cal/calibration_report.json")).unwrap()).unwrap();
    assert_eq!(report["upsilon2"].as_f64(), Some(52.1));
    assert_eq!(report["upsilon2_rounds"].as_u64(), Some(0));
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let dir = calibrated();
    let p = dir.path();
    assert_eq!(shiftsim(p, &["simulate", "--world", "absent.json"]).status.code(), Some(2));
    fs::write(p.join("bad.json"), "{\"bad").unwrap();
    assert_eq!(shiftsim(p, &["simulate", "--world", "bad.json", "--out", "z"]).status.code(), Some(4));
    let scen = r#"{"kind":"close_haven","haven":0}"#;
    let o = shiftsim(p, &["simulate", "--world", "cal/world.json", "--scenario", scen, "--out", "y"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(p.join("typo.toml"), "world = \"cal/world.json\"\nmodee = \"long\"\n").unwrap();
    assert_eq!(shiftsim(p, &["simulate", "-c", "typo.toml"]).status.code(), Some(2));
}
