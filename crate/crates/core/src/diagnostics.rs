//! Model-level checks on computed states: overlap, the entropy-dissipation
//! bound along a trajectory, interface sign conditions, and sweep helpers.

use std::collections::BTreeSet;

use crate::energy::{Model, ModelParams};
use crate::error::{Error, Result};
use crate::mesh::{inner, l2_distance, Field, Mesh};
use crate::table::Table;

/// `∫ r b`.
pub fn overlap(mesh: &Mesh, r: &[f64], b: &[f64]) -> Result<f64> {
    mesh.check(r)?;
    mesh.check(b)?;
    Ok(mesh
        .weights()
        .iter()
        .zip(r.iter().zip(b))
        .map(|(w, (x, y))| w * (x * y))
        .sum())
}

/// Per-step check of `(εF^E + F^C)(t_n) ≤ (εF^E + F^C)(t_0) + C t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    /// Columns: t, lhs, bound, C, margin.
    pub table: Table,
    pub min_margin: f64,
    pub steps: usize,
}

impl EntropyReport {
    pub fn passed(&self) -> bool {
        self.min_margin >= 0.0
    }

    pub fn verdict(&self) -> String {
        format!(
            "{} entropy_dissipation steps={} min_margin={:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.steps,
            self.min_margin
        )
    }
}

/// `¼(−c11‖r‖ + ‖b‖)² + ¼(−c22‖b‖ + ‖r‖)²`, zero without interaction.
pub fn dissipation_constant(params: &ModelParams, norm_r: f64, norm_b: f64) -> f64 {
    if params.kernel.is_none() {
        return 0.0;
    }
    0.25 * (-params.c11 * norm_r + norm_b).powi(2) + 0.25 * (-params.c22 * norm_b + norm_r).powi(2)
}

/// Evaluates the bound on an evolve trace. `C` at step n is the largest value
/// of the constant seen on `[0, t_n]`.
pub fn entropy_dissipation_report(trace: &Table, params: &ModelParams) -> Result<EntropyReport> {
    let col = |name: &str| {
        trace
            .column(name)
            .ok_or_else(|| Error::InvalidArgument(format!("trace lacks column `{name}`")))
    };
    let (t, fe, fc) = (col("t")?, col("F_E")?, col("F_C")?);
    let (nr, nb) = (col("norm_r")?, col("norm_b")?);
    if t.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let lhs: Vec<f64> = fe.iter().zip(&fc).map(|(e, c)| params.eps * e + c).collect();
    let mut table = Table::new(&["t", "lhs", "bound", "C", "margin"]);
    let mut c_max: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    for k in 0..t.len() {
        c_max = c_max.max(dissipation_constant(params, nr[k], nb[k]));
        let bound = lhs[0] + c_max * (t[k] - t[0]);
        let margin = bound - lhs[k];
        min_margin = min_margin.min(margin);
        table.push(vec![t[k], lhs[k], bound, c_max, margin]);
    }
    Ok(EntropyReport {
        table,
        min_margin,
        steps: t.len() - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Void,
    Red,
    Blue,
}

impl Phase {
    pub fn code(self) -> f64 {
        match self {
            Phase::Void => 0.0,
            Phase::Red => 1.0,
            Phase::Blue => 2.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Void => "void",
            Phase::Red => "red",
            Phase::Blue => "blue",
        }
    }
}

/// Nodal phase: `r ≈ 1`, `b ≈ 1` or `ρ ≈ 0` within `threshold`.
pub fn classify(r: f64, b: f64, threshold: f64) -> Option<Phase> {
    if (r - 1.0).abs() < threshold {
        Some(Phase::Red)
    } else if (b - 1.0).abs() < threshold {
        Some(Phase::Blue)
    } else if r + b < threshold {
        Some(Phase::Void)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityOptions {
    pub threshold: f64,
    /// Allowed negative slope; `None` means the mesh size.
    pub tol: Option<f64>,
    /// Weight `w` in `S_r = 2w(c11 K∗r − K∗b) + V`; ½ gives the fields
    /// driving the evolution equations.
    pub interaction_weight: f64,
}

impl Default for StationarityOptions {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            tol: None,
            interaction_weight: 0.5,
        }
    }
}

/// One interface crossing, oriented from the full phase `from` to `to`
/// (red towards blue for red|blue interfaces).
#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    pub from_node: usize,
    pub to_node: usize,
    pub from: Phase,
    pub to: Phase,
    pub ds_r: f64,
    pub ds_b: f64,
    /// `None` at red|blue interfaces, where no combined condition is checked.
    pub violated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub threshold: f64,
    pub tol: f64,
    pub interfaces: Vec<Interface>,
}

impl StationarityReport {
    pub fn violations(&self) -> usize {
        self.interfaces.iter().filter(|i| i.violated == Some(true)).count()
    }

    pub fn unverified(&self) -> usize {
        self.interfaces.iter().filter(|i| i.violated.is_none()).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    pub fn verdict(&self) -> String {
        format!(
            "{} stationarity interfaces={} violations={} unverified={} threshold={} tol={:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.interfaces.len(),
            self.violations(),
            self.unverified(),
            self.threshold,
            self.tol
        )
    }

    pub fn table(&self, mesh: &Mesh) -> Table {
        let mut t = Table::new(&[
            "from_node",
            "to_node",
            "from_phase",
            "to_phase",
            "x_from",
            "x_to",
            "dS_r",
            "dS_b",
            "violation",
        ]);
        for i in &self.interfaces {
            t.push(vec![
                i.from_node as f64,
                i.to_node as f64,
                i.from.code(),
                i.to.code(),
                mesh.x(i.from_node),
                mesh.x(i.to_node),
                i.ds_r,
                i.ds_b,
                i.violated.map_or(f64::NAN, |v| v as u8 as f64),
            ]);
        }
        t
    }
}

/// Sign conditions at phase interfaces: leaving a full phase towards void,
/// neither `S_r` nor `S_b` may decrease by more than `tol` per unit length.
pub fn stationarity_signs(
    model: &Model,
    r: &[f64],
    b: &[f64],
    opts: StationarityOptions,
) -> Result<StationarityReport> {
    let mesh = model.mesh();
    mesh.check(r)?;
    mesh.check(b)?;
    let p = model.params();
    let (ur, ub) = (model.convolve(r)?, model.convolve(b)?);
    let v = model.potential();
    let w2 = 2.0 * opts.interaction_weight;
    let s_r: Vec<f64> = (0..mesh.n_nodes())
        .map(|i| w2 * (p.c11 * ur[i] - ub[i]) + v[i])
        .collect();
    let s_b: Vec<f64> = (0..mesh.n_nodes())
        .map(|i| w2 * (p.c22 * ub[i] - ur[i]) + v[i])
        .collect();
    let tol = opts.tol.unwrap_or(mesh.h());
    let phase: Vec<Option<Phase>> = (0..mesh.n_nodes())
        .map(|i| classify(r[i], b[i], opts.threshold))
        .collect();

    let mut adj = vec![Vec::new(); mesh.n_nodes()];
    for (i, j) in mesh.edges() {
        adj[i].push(j);
        adj[j].push(i);
    }
    // pairs of differently classified nodes, adjacent or joined through one
    // unclassified transition node
    let mut pairs = BTreeSet::new();
    for i in 0..mesh.n_nodes() {
        let Some(pi) = phase[i] else { continue };
        for &j in &adj[i] {
            match phase[j] {
                Some(pj) if pj != pi => {
                    pairs.insert((i.min(j), i.max(j)));
                }
                Some(_) => {}
                None => {
                    for &k in &adj[j] {
                        if matches!(phase[k], Some(pk) if pk != pi) {
                            pairs.insert((i.min(k), i.max(k)));
                        }
                    }
                }
            }
        }
    }
    let dist = |i: usize, j: usize| {
        let (a, c) = (mesh.point(i), mesh.point(j));
        a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let mut interfaces = Vec::new();
    for (i, j) in pairs {
        let (pi, pj) = (phase[i].unwrap(), phase[j].unwrap());
        // orient from full to void, red to blue
        let (from, to) = if pj == Phase::Void || (pi == Phase::Red && pj == Phase::Blue) {
            (i, j)
        } else {
            (j, i)
        };
        let d = dist(from, to);
        let ds_r = (s_r[to] - s_r[from]) / d;
        let ds_b = (s_b[to] - s_b[from]) / d;
        let (fp, tp) = (phase[from].unwrap(), phase[to].unwrap());
        let violated = (tp == Phase::Void).then(|| ds_r < -tol || ds_b < -tol);
        interfaces.push(Interface {
            from_node: from,
            to_node: to,
            from: fp,
            to: tp,
            ds_r,
            ds_b,
            violated,
        });
    }
    Ok(StationarityReport {
        threshold: opts.threshold,
        tol,
        interfaces,
    })
}

/// `‖r1 − r2‖ + ‖b1 − b2‖` and the same relative to `‖r2‖ + ‖b2‖`.
pub fn pair_distance(mesh: &Mesh, r1: &Field, b1: &Field, r2: &Field, b2: &Field) -> (f64, f64) {
    let d = l2_distance(mesh, r1, r2) + l2_distance(mesh, b1, b2);
    let scale = inner(mesh, r2, r2).sqrt() + inner(mesh, b2, b2).sqrt();
    (d, if scale > 0.0 { d / scale } else { d })
}

/// Least-squares line through the points: `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

pub fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}
