//! Executes a [`RunSpec`] and writes its artifact directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crossdiff_core::diagnostics::{
    entropy_dissipation_report, linear_fit, overlap, pair_distance, stationarity_signs, strictly_decreasing,
    strictly_increasing, StationarityOptions,
};
use crossdiff_core::evolve::{self, init_bumps, init_heaviside, State};
use crossdiff_core::mesh::integrate;
use crossdiff_core::minimize::{admm_run, random_init_tilted};
use crossdiff_core::{AdmmResult, EnergyBreakdown, EvolveResult, Field, Mesh, Model, ModelParams, Table};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Init, Mode, RunSpec, SweepBase};
use crate::io::{blob_hash, fields_table, file_hash, read_fields, write_mesh, write_table};

pub const FIRST_VARIATION_TOL: f64 = 1e-3;
pub const COMPARE_TOL: f64 = 0.05;

/// One-line verdict, e.g. `PASS mass_conservation max_drift=1e-16`.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
        .trim_end()
        .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub verdicts: Vec<Verdict>,
    pub manifest: Value,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// Initial densities with the resolved parameters; deterministic inits fix
/// the masses themselves.
pub fn initial_fields(spec: &RunSpec, mesh: &Mesh) -> Result<(Field, Field, ModelParams)> {
    match &spec.init {
        Init::Random { seed: _, tilt } => {
            let params = spec.model.resolve(mesh.dim(), None)?;
            let seed = seed_of(spec).unwrap();
            let (r, b) = random_init_tilted(mesh, &params, seed, *tilt);
            Ok((r, b, params))
        }
        Init::Heaviside {
            amplitude,
            amplitude_b,
            halfwidth,
            gamma,
        } => {
            let r = init_heaviside(mesh, *amplitude, *halfwidth, *gamma)?;
            let b = init_heaviside(mesh, amplitude_b.unwrap_or(*amplitude), *halfwidth, *gamma)?;
            with_data_masses(spec, mesh, r, b)
        }
        Init::Bumps {
            amplitude,
            amplitude_b,
            centers,
            halfwidth,
            gamma,
        } => {
            let r = init_bumps(mesh, *amplitude, centers, *halfwidth, *gamma)?;
            let b = init_bumps(mesh, amplitude_b.unwrap_or(*amplitude), centers, *halfwidth, *gamma)?;
            with_data_masses(spec, mesh, r, b)
        }
        Init::File { path } => {
            let (r, b) = read_fields(&spec.resolve_path(path), mesh).context("init.path")?;
            with_data_masses(spec, mesh, r, b)
        }
    }
}

fn with_data_masses(spec: &RunSpec, mesh: &Mesh, r: Field, b: Field) -> Result<(Field, Field, ModelParams)> {
    let m = (integrate(mesh, &r)?, integrate(mesh, &b)?);
    for (name, given, actual) in [("m_r", spec.model.m_r, m.0), ("m_b", spec.model.m_b, m.1)] {
        if let Some(g) = given {
            if (g - actual).abs() > 1e-9 * actual.abs().max(1.0) {
                bail!("model.{name}: {g} differs from the mass {actual} of the initial data");
            }
        }
    }
    let params = spec.model.resolve(mesh.dim(), Some(m))?;
    Ok((r, b, params))
}

fn seed_of(spec: &RunSpec) -> Option<u64> {
    match spec.init {
        Init::Random { seed, .. } => Some(seed),
        _ => None,
    }
}

fn energy_json(e: &EnergyBreakdown) -> Value {
    json!({
        "eps": e.eps,
        "F_E": e.entropic,
        "F_0": e.interaction,
        "F_C": e.confinement,
        "total": e.total,
        "flow_energy": e.flow_energy(),
    })
}

fn mesh_json(mesh: &Mesh) -> Value {
    json!({
        "dim": mesh.dim(),
        "nodes": mesh.n_nodes(),
        "cells": mesh.n_cells(),
        "h": mesh.h(),
        "volume": mesh.volume(),
    })
}

/// Everything needed to re-run: the resolved spec, mesh and any input files.
fn input_hash(spec: &RunSpec, dir: &Path) -> Result<String> {
    let mut bytes = fs::read(dir.join("config.json"))?;
    bytes.extend(fs::read(dir.join("mesh.txt"))?);
    if let Init::File { path } = &spec.init {
        bytes.extend(fs::read(spec.resolve_path(path))?);
    }
    Ok(blob_hash(&bytes))
}

fn prepare_dir(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let mut stored = spec.clone();
    stored.output = Some(dir.to_path_buf());
    if let Init::File { path } = &mut stored.init {
        *path = spec.resolve_path(path);
    }
    if let crate::config::Domain::File { path } = &mut stored.domain {
        *path = spec.resolve_path(path);
    }
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&stored)? + "\n")?;
    write_mesh(&dir.join("mesh.txt"), mesh)
}

fn finish(dir: &Path, mut manifest: Value, verdicts: Vec<Verdict>, artifacts: &[&str]) -> Result<Outcome> {
    let mut hashes = serde_json::Map::new();
    for a in artifacts {
        hashes.insert(a.to_string(), Value::String(file_hash(&dir.join(a))?));
    }
    manifest["artifacts"] = Value::Object(hashes);
    manifest["verdicts"] = verdicts.iter().map(|v| Value::String(v.line())).collect();
    let lines: String = verdicts.iter().map(|v| v.line() + "\n").collect();
    fs::write(dir.join("verdicts.txt"), lines)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(Outcome {
        dir: dir.to_path_buf(),
        verdicts,
        manifest,
    })
}

pub fn run_experiment(spec: &RunSpec) -> Result<Outcome> {
    let dir = spec.output_dir();
    run_in(spec, &dir)
}

pub fn run_in(spec: &RunSpec, dir: &Path) -> Result<Outcome> {
    let mesh = spec.build_mesh().context("stage mesh")?;
    spec.validate(&mesh).context("stage config")?;
    match spec.mode {
        Mode::Minimize => run_minimize(spec, dir, &mesh),
        Mode::Evolve => run_evolve(spec, dir, &mesh),
        Mode::Sweep => run_sweep(spec, dir, &mesh),
        Mode::Compare => run_compare(spec, dir, &mesh),
    }
}

fn base_manifest(spec: &RunSpec, dir: &Path, mesh: &Mesh, params: &ModelParams) -> Result<Value> {
    let mut m = json!({
        "name": spec.name,
        "mode": spec.mode,
        "version": env!("CARGO_PKG_VERSION"),
        "input_hash": input_hash(spec, dir)?,
        "seed": seed_of(spec),
        "mesh": mesh_json(mesh),
        "model": params,
        "init": spec.init,
    });
    if matches!(spec.mode, Mode::Minimize | Mode::Compare)
        || matches!(&spec.sweep, Some(s) if s.base == SweepBase::Minimize)
    {
        m["admm"] = serde_json::to_value(&spec.admm)?;
    }
    if matches!(spec.mode, Mode::Evolve | Mode::Compare)
        || matches!(&spec.sweep, Some(s) if s.base == SweepBase::Evolve)
    {
        m["evolve"] = serde_json::to_value(&spec.evolve)?;
    }
    Ok(m)
}

/// Minimizer plus the diagnostics that only need the final fields.
pub struct MinimizeRun {
    pub result: AdmmResult,
    pub params: ModelParams,
    pub overlap: f64,
    /// `dev/range` of the first-variation residual per species, for ε > 0.
    pub first_variation: Option<(f64, f64)>,
    pub outcome: Outcome,
}

pub fn minimize_stage(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<MinimizeRun> {
    prepare_dir(spec, dir, mesh)?;
    let (r0, b0, params) = initial_fields(spec, mesh).context("stage init")?;
    let model = Model::new(mesh, params.clone()).context("stage model")?;
    let result = admm_run(&model, &r0, &b0, &spec.admm).context("stage minimize")?;
    write_table(&dir.join("fields.csv"), &fields_table(mesh, &result.r, &result.b))?;
    write_table(&dir.join("trace.csv"), &result.trace)?;

    let mut verdicts = vec![Verdict::new(
        "admm_feasibility",
        true,
        format!(
            "iterations={} asserted={}",
            result.iterations, spec.admm.assert_invariants
        ),
    )];
    let viol = result
        .r
        .iter()
        .zip(result.b.iter())
        .map(|(x, y)| (-x).max(-y).max(x + y - 1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    verdicts.push(Verdict::new(
        "box_constraints",
        viol <= spec.admm.delta + 1e-12,
        format!("max_violation={viol:e} tol={:e}", spec.admm.delta),
    ));
    let ov = overlap(mesh, &result.r, &result.b)?;
    let w = spec.admm.gradient.interaction_weight();
    // an unconverged result can sit just outside the simplex after the final
    // mass shift, where the entropy variables are undefined
    let first_variation = match (
        params.eps > 0.0,
        model.first_variation_residual(&result.r, &result.b, w),
    ) {
        (false, _) => None,
        (true, Ok(fv)) => {
            let ratio = (
                fv.dev_r / fv.scale_r.max(f64::MIN_POSITIVE),
                fv.dev_b / fv.scale_b.max(f64::MIN_POSITIVE),
            );
            if result.converged {
                verdicts.push(Verdict::new(
                    "first_variation",
                    ratio.0 <= FIRST_VARIATION_TOL && ratio.1 <= FIRST_VARIATION_TOL,
                    format!(
                        "dev_over_range_r={:e} dev_over_range_b={:e} tol={FIRST_VARIATION_TOL:e}",
                        ratio.0, ratio.1
                    ),
                ));
            }
            Some(ratio)
        }
        (true, Err(e)) => {
            if result.converged {
                verdicts.push(Verdict::new("first_variation", false, format!("undefined: {e}")));
            }
            None
        }
    };
    let signs = stationarity_signs(
        &model,
        &result.r,
        &result.b,
        StationarityOptions {
            threshold: spec.diagnostics.threshold,
            tol: spec.diagnostics.sign_tol,
            interaction_weight: w,
        },
    )?;
    write_table(&dir.join("stationarity.csv"), &signs.table(mesh))?;
    let sv = signs.verdict();
    verdicts.push(Verdict::new(
        "stationarity",
        signs.passed(),
        sv.split_once(" stationarity ").map_or("", |x| x.1),
    ));

    let mut manifest = base_manifest(spec, dir, mesh, &params)?;
    manifest["result"] = json!({
        "energy": energy_json(&result.energy),
        "converged": result.converged,
        "iterations": result.iterations,
        "primal_res_r": result.res_r,
        "primal_res_b": result.res_b,
        "overlap": ov,
        "first_variation_dev_over_range": first_variation.map(|(a, b)| vec![a, b]),
    });
    let outcome = finish(
        dir,
        manifest,
        verdicts,
        &["fields.csv", "trace.csv", "stationarity.csv"],
    )?;
    Ok(MinimizeRun {
        result,
        params,
        overlap: ov,
        first_variation,
        outcome,
    })
}

fn run_minimize(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<Outcome> {
    Ok(minimize_stage(spec, dir, mesh)?.outcome)
}

pub struct EvolveRun {
    pub result: EvolveResult,
    pub params: ModelParams,
    pub outcome: Outcome,
}

pub const ENERGY_BAND: f64 = 1e-8;

pub fn evolve_stage(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<EvolveRun> {
    prepare_dir(spec, dir, mesh)?;
    let (r0, b0, params) = initial_fields(spec, mesh).context("stage init")?;
    let model = Model::new(mesh, params.clone()).context("stage model")?;
    let state = State::new(&model, r0, b0)?;
    let result = evolve::run(&model, state, &spec.evolve).context("stage evolve")?;
    write_table(
        &dir.join("fields.csv"),
        &fields_table(mesh, &result.state.r, &result.state.b),
    )?;
    write_table(&dir.join("trace.csv"), &result.trace)?;
    let mut artifacts = vec!["fields.csv".to_string(), "trace.csv".to_string()];
    if !result.snapshots.is_empty() {
        fs::create_dir_all(dir.join("snapshots"))?;
        let mut index = Table::new(&["step", "t"]);
        for s in &result.snapshots {
            let name = format!("snapshots/step_{:08}.csv", s.step);
            write_table(&dir.join(&name), &fields_table(mesh, &s.r, &s.b))?;
            index.push(vec![s.step as f64, s.t]);
            artifacts.push(name);
        }
        write_table(&dir.join("snapshots/index.csv"), &index)?;
        artifacts.push("snapshots/index.csv".into());
    }

    let mut verdicts = vec![Verdict::new(
        "mass_conservation",
        result.clamped_steps > 0 || result.max_mass_drift <= spec.evolve.mass_tol,
        format!("max_drift={:e} tol={:e}", result.max_mass_drift, spec.evolve.mass_tol),
    )];
    verdicts.push(Verdict::new(
        "box_constraints",
        result.max_violation <= spec.evolve.violation_tol,
        format!(
            "max_violation={:e} tol={:e} clamped_steps={}",
            result.max_violation, spec.evolve.violation_tol, result.clamped_steps
        ),
    ));
    verdicts.push(Verdict::new(
        "energy_decay",
        result.max_energy_increase <= ENERGY_BAND,
        format!(
            "max_step_increase={:e} band={ENERGY_BAND:e}",
            result.max_energy_increase
        ),
    ));
    if params.eps > 0.0 && spec.evolve.trace_every == 1 {
        let rep = entropy_dissipation_report(&result.trace, &params)?;
        write_table(&dir.join("entropy.csv"), &rep.table)?;
        artifacts.push("entropy.csv".into());
        verdicts.push(Verdict::new(
            "entropy_dissipation",
            rep.passed(),
            format!("steps={} min_margin={:e}", rep.steps, rep.min_margin),
        ));
    }

    let final_energy = result
        .last_report
        .as_ref()
        .map(|r| r.energy.clone())
        .ok_or_else(|| anyhow!("stage evolve: no step taken"))?;
    let mut manifest = base_manifest(spec, dir, mesh, &params)?;
    manifest["result"] = json!({
        "energy": energy_json(&final_energy),
        "steps": result.steps,
        "t_final": result.state.t,
        "stop": format!("{:?}", result.stop),
        "max_mass_drift": result.max_mass_drift,
        "max_violation": result.max_violation,
        "max_energy_increase": result.max_energy_increase,
        "clamped_steps": result.clamped_steps,
        "overlap": overlap(mesh, &result.state.r, &result.state.b)?,
    });
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    let outcome = finish(dir, manifest, verdicts, &names)?;
    Ok(EvolveRun {
        result,
        params,
        outcome,
    })
}

fn run_evolve(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<Outcome> {
    Ok(evolve_stage(spec, dir, mesh)?.outcome)
}

pub fn entry_dir_name(eps: f64) -> String {
    format!("eps_{}", crate::io::format_f64(eps))
}

struct SweepEntry {
    eps: f64,
    r: Field,
    b: Field,
    energy: EnergyBreakdown,
    converged: bool,
    iterations: usize,
    first_variation: Option<(f64, f64)>,
    verdicts: Vec<Verdict>,
}

fn run_sweep(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<Outcome> {
    let sweep = spec.sweep.clone().unwrap();
    prepare_dir(spec, dir, mesh)?;
    let entries: Vec<SweepEntry> = sweep
        .eps
        .par_iter()
        .map(|&eps| -> Result<SweepEntry> {
            let mut sub = spec.clone();
            sub.mode = match sweep.base {
                SweepBase::Minimize => Mode::Minimize,
                SweepBase::Evolve => Mode::Evolve,
            };
            sub.sweep = None;
            sub.model.eps = eps;
            sub.name = format!("{}-{}", spec.name, entry_dir_name(eps));
            let sub_dir = dir.join(entry_dir_name(eps));
            match sweep.base {
                SweepBase::Minimize => {
                    let m = minimize_stage(&sub, &sub_dir, mesh).with_context(|| format!("sweep entry eps={eps}"))?;
                    Ok(SweepEntry {
                        eps,
                        r: m.result.r,
                        b: m.result.b,
                        energy: m.result.energy,
                        converged: m.result.converged,
                        iterations: m.result.iterations,
                        first_variation: m.first_variation,
                        verdicts: m.outcome.verdicts,
                    })
                }
                SweepBase::Evolve => {
                    let e = evolve_stage(&sub, &sub_dir, mesh).with_context(|| format!("sweep entry eps={eps}"))?;
                    let energy = e.result.last_report.as_ref().unwrap().energy.clone();
                    Ok(SweepEntry {
                        eps,
                        converged: e.result.stop == evolve::StopReason::Stationary,
                        iterations: e.result.steps,
                        r: e.result.state.r,
                        b: e.result.state.b,
                        energy,
                        first_variation: None,
                        verdicts: e.outcome.verdicts,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let ref_eps = sweep
        .reference_eps
        .unwrap_or_else(|| sweep.eps.iter().copied().fold(f64::INFINITY, f64::min));
    let reference = entries.iter().find(|e| e.eps == ref_eps).unwrap();
    let mut summary = Table::new(&[
        "eps",
        "overlap",
        "F_E",
        "F_0",
        "F_C",
        "total",
        "dist_r",
        "dist_b",
        "rel_dist",
        "converged",
        "iterations",
        "fv_r",
        "fv_b",
    ]);
    for e in &entries {
        let (_, rel) = pair_distance(mesh, &e.r, &e.b, &reference.r, &reference.b);
        let fv = e.first_variation.unwrap_or((f64::NAN, f64::NAN));
        summary.push(vec![
            e.eps,
            overlap(mesh, &e.r, &e.b)?,
            e.energy.entropic,
            e.energy.interaction,
            e.energy.confinement,
            e.energy.total,
            crossdiff_core::mesh::l2_distance(mesh, &e.r, &reference.r),
            crossdiff_core::mesh::l2_distance(mesh, &e.b, &reference.b),
            rel,
            e.converged as u8 as f64,
            e.iterations as f64,
            fv.0,
            fv.1,
        ]);
    }
    write_table(&dir.join("summary.csv"), &summary)?;
    let verdicts = sweep_verdicts(&summary, ref_eps, &entries);

    let (_, _, params) = initial_fields(spec, mesh)?;
    let mut manifest = base_manifest(spec, dir, mesh, &params)?;
    manifest["entries"] = entries.iter().map(|e| Value::String(entry_dir_name(e.eps))).collect();
    manifest["reference_eps"] = json!(ref_eps);
    finish(dir, manifest, verdicts, &["summary.csv"])
}

/// Sweep-level checks: overlap growth in ε, linearity of its first three
/// points, distance to the reference shrinking as ε decreases, and every
/// entry's own verdicts.
fn sweep_verdicts(summary: &Table, ref_eps: f64, entries: &[SweepEntry]) -> Vec<Verdict> {
    let mut rows: Vec<&Vec<f64>> = summary.rows.iter().collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let eps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let ov: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",");
    let mut out = vec![Verdict::new(
        "overlap_increasing",
        strictly_increasing(&ov),
        format!("eps=[{}] overlap=[{}]", list(&eps), list(&ov)),
    )];
    if eps.len() >= 3 {
        let (_, _, r2) = linear_fit(&eps[..3], &ov[..3]);
        out.push(Verdict::new(
            "overlap_linear_start",
            r2 >= 0.9,
            format!("r_squared={r2:.6} min=0.9"),
        ));
    }
    // distances of the non-reference entries, ordered from large to small ε
    let mut far: Vec<(f64, f64)> = rows.iter().filter(|r| r[0] != ref_eps).map(|r| (r[0], r[6])).collect();
    far.sort_by(|a, b| b.0.total_cmp(&a.0));
    let d: Vec<f64> = far.iter().map(|x| x.1).collect();
    if d.len() >= 2 {
        out.push(Verdict::new(
            "distance_to_reference_decreasing",
            strictly_decreasing(&d),
            format!(
                "reference_eps={ref_eps} eps=[{}] dist_r=[{}]",
                list(&far.iter().map(|x| x.0).collect::<Vec<_>>()),
                list(&d)
            ),
        ));
    }
    for e in entries {
        for v in &e.verdicts {
            out.push(Verdict::new(
                &format!("{}/{}", entry_dir_name(e.eps), v.name),
                v.pass,
                v.detail.clone(),
            ));
        }
    }
    out
}

fn run_compare(spec: &RunSpec, dir: &Path, mesh: &Mesh) -> Result<Outcome> {
    prepare_dir(spec, dir, mesh)?;
    let mut pde_spec = spec.clone();
    pde_spec.mode = Mode::Evolve;
    let pde = evolve_stage(&pde_spec, &dir.join("pde"), mesh)?;
    let mut admm_spec = spec.clone();
    admm_spec.mode = Mode::Minimize;
    let admm = minimize_stage(&admm_spec, &dir.join("admm"), mesh)?;
    let (abs, rel) = pair_distance(
        mesh,
        &pde.result.state.r,
        &pde.result.state.b,
        &admm.result.r,
        &admm.result.b,
    );
    let mut t = Table::new(&[
        "abs_l2",
        "rel_l2",
        "pde_steps",
        "pde_t",
        "pde_stationary",
        "admm_iterations",
        "admm_converged",
    ]);
    t.push(vec![
        abs,
        rel,
        pde.result.steps as f64,
        pde.result.state.t,
        (pde.result.stop == evolve::StopReason::Stationary) as u8 as f64,
        admm.result.iterations as f64,
        admm.result.converged as u8 as f64,
    ]);
    write_table(&dir.join("comparison.csv"), &t)?;
    let mut verdicts = vec![Verdict::new(
        "pde_matches_minimizer",
        rel <= COMPARE_TOL,
        format!("rel_l2={rel:e} tol={COMPARE_TOL}"),
    )];
    for (tag, o) in [("pde", &pde.outcome), ("admm", &admm.outcome)] {
        for v in &o.verdicts {
            verdicts.push(Verdict::new(&format!("{tag}/{}", v.name), v.pass, v.detail.clone()));
        }
    }
    let mut manifest = base_manifest(spec, dir, mesh, &admm.params)?;
    manifest["result"] = json!({ "abs_l2": abs, "rel_l2": rel });
    finish(dir, manifest, verdicts, &["comparison.csv"])
}
