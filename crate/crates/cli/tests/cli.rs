use std::fs;
use std::path::Path;
use std::process::Command;

use crossdiff_cli::check::check_dir;
use crossdiff_cli::presets::{self, PRESETS};
use crossdiff_cli::run::run_in;
use crossdiff_cli::RunSpec;
use serde_json::Value;

const SCHEMA: &str = include_str!("../schema/run-spec.schema.json");

const MINIMIZE: &str = r#"{
    "name": "small-min",
    "mode": "minimize",
    "domain": {"kind": "interval", "a": -1, "b": 1, "nodes": 120},
    "model": {"eps": 0.05, "c11": -1, "c22": -1.5, "m_r": 0.3333333333333333, "m_b": 0.3333333333333333},
    "admm": {"mu": 6, "step": 0.1, "box_solver": "nodewise", "max_outer": 3000, "dual_tol": 1e-8},
    "init": {"kind": "random", "seed": 7}
}"#;

const EVOLVE: &str = r#"{
    "name": "small-evolve",
    "mode": "evolve",
    "domain": {"kind": "interval", "a": -1, "b": 1, "nodes": 150},
    "model": {"eps": 0.02, "c11": -2, "c22": -0.5},
    "evolve": {"tau": 5e-4, "t_end": 0.25, "snapshot_times": [0.1, 0.25]},
    "init": {"kind": "bumps", "amplitude": 0.3333333333333333, "centers": [[-0.6, 0], [0.6, 0]],
             "halfwidth": 0.25, "gamma": 0.001}
}"#;

fn validator() -> jsonschema::Validator {
    jsonschema::validator_for(&serde_json::from_str(SCHEMA).unwrap()).unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn schema_accepts_every_preset() {
    let v = validator();
    for (name, text) in PRESETS {
        let doc: Value = serde_json::from_str(text).unwrap();
        let errors: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
    }
}

#[test]
fn schema_and_parser_agree_on_bad_documents() {
    let v = validator();
    let bad = [
        MINIMIZE.replace(r#""c11": -1, "#, ""),
        MINIMIZE.replace(r#""seed": 7"#, r#""seed": 7, "sed": 1"#),
        MINIMIZE.replace(r#""minimize""#, r#""optimize""#),
        MINIMIZE.replace(r#""nodewise""#, r#""newton""#),
    ];
    for text in &bad {
        let doc: Value = serde_json::from_str(text).unwrap();
        assert!(!v.is_valid(&doc), "schema accepted {text}");
        assert!(RunSpec::from_json(text).is_err(), "parser accepted {text}");
    }
    for text in [MINIMIZE, EVOLVE] {
        assert!(v.is_valid(&serde_json::from_str(text).unwrap()));
    }
}

#[test]
fn same_spec_and_seed_give_identical_csvs() {
    for text in [MINIMIZE, EVOLVE] {
        let spec = RunSpec::from_json(text).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_in(&spec, a.path()).unwrap();
        run_in(&spec, b.path()).unwrap();
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        assert!(ta.len() >= 3);
        assert_eq!(ta, tb);
    }
}

#[test]
fn minimize_manifest_records_energy_and_checks_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(&RunSpec::from_json(MINIMIZE).unwrap(), dir.path()).unwrap();
    assert!(out.passed(), "{:?}", out.verdicts);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for k in ["F_E", "F_0", "F_C", "total", "eps"] {
        assert!(m["result"]["energy"][k].is_number(), "{k}");
    }
    assert_eq!(m["seed"], 7);
    assert_eq!(m["mesh"]["nodes"], 120);
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
    let verdicts = check_dir(dir.path()).unwrap();
    assert!(verdicts.iter().all(|v| v.pass), "{verdicts:?}");
}

#[test]
fn check_detects_edited_fields() {
    let dir = tempfile::tempdir().unwrap();
    run_in(&RunSpec::from_json(EVOLVE).unwrap(), dir.path()).unwrap();
    assert!(check_dir(dir.path()).unwrap().iter().all(|v| v.pass));
    let p = dir.path().join("fields.csv");
    let text = fs::read_to_string(&p).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cols: Vec<&str> = lines[40].split(',').collect();
    lines[40] = format!("{},{},0.99,{}", cols[0], cols[1], cols[3]);
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    let failed: Vec<String> = check_dir(dir.path())
        .unwrap()
        .into_iter()
        .filter(|v| !v.pass)
        .map(|v| v.name)
        .collect();
    assert!(failed.contains(&"artifact_hashes".to_string()), "{failed:?}");
    assert!(failed.contains(&"masses".to_string()), "{failed:?}");
}

#[test]
fn evolve_writes_requested_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(&RunSpec::from_json(EVOLVE).unwrap(), dir.path()).unwrap();
    assert!(out.passed(), "{:?}", out.verdicts);
    let idx = crossdiff_cli::io::read_table(&dir.path().join("snapshots/index.csv")).unwrap();
    let t = idx.column("t").unwrap();
    assert_eq!(t.len(), 2);
    assert!((t[0] - 0.1).abs() < 1e-9 && (t[1] - 0.25).abs() < 1e-9, "{t:?}");
    assert!(dir.path().join("entropy.csv").exists());
}

#[test]
fn binary_names_missing_field_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, MINIMIZE.replace(r#""c22": -1.5, "#, "")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crossdiff"))
        .arg("run")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model") && err.contains("c22"), "{err}");
}

#[test]
fn binary_runs_config_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let outdir = dir.path().join("art");
    let mut doc: Value = serde_json::from_str(EVOLVE).unwrap();
    doc["output"] = Value::String(outdir.display().to_string());
    fs::write(&cfg, doc.to_string()).unwrap();
    let bin = env!("CARGO_BIN_EXE_crossdiff");
    let run = Command::new(bin).arg("run").arg(&cfg).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let check = Command::new(bin).arg("check").arg(&outdir).output().unwrap();
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stdout));
    let list = Command::new(bin).args(["preset", "list"]).output().unwrap();
    assert_eq!(
        String::from_utf8_lossy(&list.stdout).lines().count(),
        presets::names().count()
    );
}

#[test]
fn infeasible_masses_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, MINIMIZE.replace(r#""m_r": 0.3333333333333333"#, r#""m_r": 1.8"#)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crossdiff"))
        .arg("run")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));
}

#[test]
fn truncated_sweep_still_writes_checkable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = presets::preset("overlap-vs-eps").unwrap();
    spec.admm.max_outer = 300;
    let out = run_in(&spec, dir.path()).unwrap();
    let summary = crossdiff_cli::io::read_table(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.rows.len(), 5);
    assert!(!out
        .verdicts
        .iter()
        .any(|v| v.name.ends_with("first_variation") && v.pass));
    let failed: Vec<String> = check_dir(dir.path())
        .unwrap()
        .into_iter()
        .filter(|v| !v.pass)
        .map(|v| v.name)
        .collect();
    let reported: Vec<String> = out.verdicts.into_iter().filter(|v| !v.pass).map(|v| v.name).collect();
    for name in &failed {
        assert!(
            name.ends_with("box_constraints") || name.ends_with("recomputed_energy"),
            "{failed:?}"
        );
    }
    for name in failed.iter().filter(|n| n.ends_with("box_constraints")) {
        assert!(reported.contains(name), "{name} not reported by the run: {reported:?}");
    }
}
