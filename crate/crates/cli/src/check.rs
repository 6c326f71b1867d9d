//! Re-verifies an artifact directory from its stored files alone.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crossdiff_core::diagnostics::{entropy_dissipation_report, pair_distance};
use crossdiff_core::{EvolveConfig, Model, ModelParams, Table};
use serde_json::Value;

use crate::io::{blob_hash, file_hash, read_fields, read_mesh, read_table};
use crate::run::{Verdict, ENERGY_BAND};

const RECOMPUTE_TOL: f64 = 1e-10;

fn load_manifest(dir: &Path) -> Result<Value> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| p.display().to_string())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn num(v: &Value, path: &str) -> Result<f64> {
    v.pointer(path)
        .and_then(Value::as_f64)
        .with_context(|| format!("manifest lacks numeric `{path}`"))
}

pub fn check_dir(dir: &Path) -> Result<Vec<Verdict>> {
    let manifest = load_manifest(dir)?;
    let mut out = vec![hash_verdict(dir, &manifest)?];
    let mode = manifest["mode"].as_str().unwrap_or_default().to_string();
    match mode.as_str() {
        "minimize" => out.extend(check_fields(dir, &manifest, None)?),
        "evolve" => {
            let cfg: EvolveConfig = serde_json::from_value(manifest["evolve"].clone()).context("manifest evolve")?;
            out.extend(check_fields(dir, &manifest, Some(&cfg))?);
            out.extend(check_trace(dir, &manifest, &cfg)?);
        }
        "sweep" => {
            let entries = manifest["entries"].as_array().context("manifest lacks `entries`")?;
            for e in entries {
                let name = e.as_str().context("entry name")?;
                out.extend(prefixed(name, check_dir(&dir.join(name))?));
            }
        }
        "compare" => {
            for sub in ["pde", "admm"] {
                out.extend(prefixed(sub, check_dir(&dir.join(sub))?));
            }
            let mesh = read_mesh(&dir.join("mesh.txt"))?;
            let (pr, pb) = read_fields(&dir.join("pde/fields.csv"), &mesh)?;
            let (ar, ab) = read_fields(&dir.join("admm/fields.csv"), &mesh)?;
            let (_, rel) = pair_distance(&mesh, &pr, &pb, &ar, &ab);
            let stored = num(&manifest, "/result/rel_l2")?;
            out.push(Verdict::new(
                "recomputed_distance",
                rel_close(rel, stored, RECOMPUTE_TOL),
                format!("rel_l2={rel:e} manifest={stored:e}"),
            ));
        }
        other => bail!("{}: unknown mode `{other}`", dir.display()),
    }
    Ok(out)
}

fn prefixed(prefix: &str, v: Vec<Verdict>) -> Vec<Verdict> {
    v.into_iter()
        .map(|x| Verdict::new(&format!("{prefix}/{}", x.name), x.pass, x.detail))
        .collect()
}

fn hash_verdict(dir: &Path, manifest: &Value) -> Result<Verdict> {
    let mut bad = Vec::new();
    let artifacts = manifest["artifacts"]
        .as_object()
        .context("manifest lacks `artifacts`")?;
    for (name, want) in artifacts {
        let got = file_hash(&dir.join(name))?;
        if Some(got.as_str()) != want.as_str() {
            bad.push(name.clone());
        }
    }
    let mut inputs = fs::read(dir.join("config.json"))?;
    inputs.extend(fs::read(dir.join("mesh.txt"))?);
    let config: Value = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
    if let Some(p) = config.pointer("/init/path").and_then(Value::as_str) {
        inputs.extend(fs::read(p).with_context(|| format!("init file {p}"))?);
    }
    if Some(blob_hash(&inputs).as_str()) != manifest["input_hash"].as_str() {
        bad.push("input_hash".into());
    }
    Ok(Verdict::new(
        "artifact_hashes",
        bad.is_empty(),
        format!("files={} mismatched=[{}]", artifacts.len(), bad.join(",")),
    ))
}

/// Box, masses and energy of `fields.csv` against the manifest.
fn check_fields(dir: &Path, manifest: &Value, evolve: Option<&EvolveConfig>) -> Result<Vec<Verdict>> {
    let mesh = read_mesh(&dir.join("mesh.txt"))?;
    let (r, b) = read_fields(&dir.join("fields.csv"), &mesh)?;
    let params: ModelParams = serde_json::from_value(manifest["model"].clone()).context("manifest model")?;
    // minimizer output is feasible up to the δ of its box block
    let slack = match evolve {
        Some(c) => c.violation_tol.max(0.0) + 1e-12,
        None => manifest.pointer("/admm/delta").and_then(Value::as_f64).unwrap_or(0.0) + 1e-12,
    };
    let viol = r
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (-x).max(-y).max(x + y - 1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![Verdict::new(
        "box_constraints",
        viol <= slack,
        format!("max_violation={viol:e} tol={slack:e}"),
    )];
    let mr = crossdiff_core::mesh::integrate(&mesh, &r)?;
    let mb = crossdiff_core::mesh::integrate(&mesh, &b)?;
    let mass_tol = evolve.map_or(1e-6, |c| c.mass_tol * 1e3);
    out.push(Verdict::new(
        "masses",
        rel_close(mr, params.m_r, mass_tol) && rel_close(mb, params.m_b, mass_tol),
        format!("m_r={mr:e}/{:e} m_b={mb:e}/{:e}", params.m_r, params.m_b),
    ));
    let model = Model::new_unchecked(&mesh, params)?;
    let stored = num(manifest, "/result/energy/total")?;
    // the box verdict above already reports any excess; the energy is still
    // the one the run stored
    out.push(match model.energy_with_slack(&r, &b, slack.max(viol + 1e-12)) {
        Ok(e) => Verdict::new(
            "recomputed_energy",
            rel_close(e.total, stored, RECOMPUTE_TOL),
            format!("total={:e} manifest={stored:e}", e.total),
        ),
        Err(err) => Verdict::new("recomputed_energy", false, format!("undefined: {err}")),
    });
    Ok(out)
}

fn column(t: &Table, name: &str) -> Result<Vec<f64>> {
    t.column(name).with_context(|| format!("trace.csv lacks `{name}`"))
}

fn check_trace(dir: &Path, manifest: &Value, cfg: &EvolveConfig) -> Result<Vec<Verdict>> {
    let trace = read_table(&dir.join("trace.csv"))?;
    let params: ModelParams = serde_json::from_value(manifest["model"].clone())?;
    let drift = column(&trace, "mass_drift")?.into_iter().fold(0.0, f64::max);
    let (mr, mb) = (column(&trace, "mass_r")?, column(&trace, "mass_b")?);
    let steps = column(&trace, "step")?.last().copied().unwrap_or(0.0).max(1.0);
    let total = (mr[mr.len() - 1] - mr[0]).abs().max((mb[mb.len() - 1] - mb[0]).abs());
    let clamped = manifest
        .pointer("/result/clamped_steps")
        .and_then(Value::as_u64)
        .unwrap_or(0)
        > 0;
    let mut out = vec![Verdict::new(
        "mass_conservation",
        clamped || (drift <= cfg.mass_tol && total <= cfg.mass_tol * steps),
        format!("max_step_drift={drift:e} total_drift={total:e} tol={:e}", cfg.mass_tol),
    )];
    let viol = column(&trace, "max_violation")?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(Verdict::new(
        "box_along_trajectory",
        viol <= cfg.violation_tol,
        format!("max_violation={viol:e} tol={:e}", cfg.violation_tol),
    ));
    let flow = column(&trace, "flow_energy")?;
    let inc = flow.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    out.push(Verdict::new(
        "energy_decay",
        !(inc > ENERGY_BAND),
        format!("max_recorded_increase={inc:e} band={ENERGY_BAND:e}"),
    ));
    if dir.join("entropy.csv").exists() {
        let rep = entropy_dissipation_report(&trace, &params)?;
        let stored = read_table(&dir.join("entropy.csv"))?;
        out.push(Verdict::new(
            "entropy_dissipation",
            rep.passed() && stored.rows == rep.table.rows,
            format!(
                "steps={} min_margin={:e} matches_stored={}",
                rep.steps,
                rep.min_margin,
                stored.rows == rep.table.rows
            ),
        ));
    }
    Ok(out)
}
