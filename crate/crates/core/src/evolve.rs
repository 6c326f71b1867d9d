//! IMEX P1 time stepping for the cross-diffusion system with no-flux
//! boundaries.
//!
//! Diffusion is implicit with coefficients lagged at the old step, the
//! nonlocal transport is explicit. The balanced variant writes both as edge
//! fluxes of one chemical potential so that steady states coincide with the
//! minimizers' optimality conditions on the same mesh. Both species are solved together as one
//! interleaved 2N system, so node `i` owns unknowns `2i` (r) and `2i+1` (b).

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyBreakdown, Model};
use crate::error::{Error, Result};
use crate::mesh::{inner, integrate, l2_distance, l2_norm, Field, Mesh};
use crate::sparse::{CsrMatrix, LinearSolver, SparseSystem};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MassMatrix {
    Consistent,
    #[default]
    Lumped,
}

/// How the explicit transport flux is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Galerkin form with the mobility evaluated at cell centroids.
    Central,
    /// Edge fluxes carrying the upwind density into the downwind vacancy.
    #[default]
    Upwind,
    /// Diffusion and transport both as edge fluxes over the stiffness graph,
    /// with logarithmic means of r, b and the vacancy as edge coefficients.
    /// A vanishing flux is then exactly a constant nodal chemical potential,
    /// so steady states are critical points of the lumped energy.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    pub tau: f64,
    pub t_end: f64,
    pub stop_tol: f64,
    pub mass: MassMatrix,
    pub transport: Transport,
    pub solver_tol: f64,
    /// Largest tolerated `max(−r, −b, ρ−1)`.
    pub violation_tol: f64,
    /// Clamp into the simplex instead of aborting on a violation.
    pub clamp: bool,
    /// Abort when a step changes a species mass by more than this.
    pub mass_tol: f64,
    /// Record every k-th step in the trace (the final step is always kept).
    pub trace_every: usize,
    pub snapshot_every: Option<usize>,
    pub snapshot_times: Vec<f64>,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            tau: 5e-4,
            t_end: 1.0,
            stop_tol: 1e-12,
            mass: MassMatrix::Lumped,
            transport: Transport::Upwind,
            solver_tol: 1e-13,
            violation_tol: 1e-8,
            clamp: false,
            mass_tol: 1e-10,
            trace_every: 1,
            snapshot_every: None,
            snapshot_times: Vec::new(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.stop_tol >= 0.0 && self.solver_tol > 0.0 && self.violation_tol >= 0.0) {
            return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
        }
        if self.trace_every == 0 || self.snapshot_every == Some(0) {
            return Err(Error::InvalidArgument("output strides must be at least 1".into()));
        }
        Ok(())
    }
}

/// Densities at time `t` plus their cached convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub r: Field,
    pub b: Field,
    pub rho: Field,
    ur: Vec<f64>,
    ub: Vec<f64>,
}

impl State {
    pub fn new(model: &Model, r: Field, b: Field) -> Result<Self> {
        Self::at_time(model, 0.0, r, b)
    }

    pub fn at_time(model: &Model, t: f64, r: Field, b: Field) -> Result<Self> {
        let mesh = model.mesh();
        mesh.check(&r)?;
        mesh.check(&b)?;
        let rho = r.zip_map(&b, |a, c| a + c);
        let ur = model.convolve(&r)?;
        let ub = model.convolve(&b)?;
        Ok(Self { t, r, b, rho, ur, ub })
    }

    pub fn kr(&self) -> &[f64] {
        &self.ur
    }

    pub fn kb(&self) -> &[f64] {
        &self.ub
    }

    /// Largest `max(−r, −b, ρ−1)` and the node where it occurs.
    pub fn violation(&self) -> (f64, usize) {
        let mut worst = (f64::NEG_INFINITY, 0);
        for i in 0..self.r.len() {
            let v = (-self.r[i]).max(-self.b[i]).max(self.rho[i] - 1.0);
            if v > worst.0 {
                worst = (v, i);
            }
        }
        worst
    }

    pub fn energy(&self, model: &Model, slack: f64) -> Result<EnergyBreakdown> {
        let fe = model.entropy(&self.r, &self.b, slack)?;
        let f0 = model.interaction_from(&self.r, &self.b, &self.ur, &self.ub);
        let fc = model.confinement(&self.r, &self.b)?;
        Ok(EnergyBreakdown::new(model.params().eps, fe, f0, fc))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub tau: f64,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    /// Largest per-species `|∫x^{n+1} − ∫x^n|`.
    pub mass_drift: f64,
    /// `max(−r, −b, ρ−1)` before any clamping.
    pub violation: f64,
    pub violation_node: usize,
    pub clamped: bool,
    /// `‖r^{n+1} − r^n‖ + ‖b^{n+1} − b^n‖`.
    pub change: f64,
    pub energy: EnergyBreakdown,
}

/// `H_γ(s) = (π/2 + atan(s/γ))/π`.
pub fn heaviside(s: f64, gamma: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 + (s / gamma).atan()) / std::f64::consts::PI
}

/// `amplitude · H_γ(halfwidth − |x|)` at every node.
pub fn init_heaviside(mesh: &Mesh, amplitude: f64, halfwidth: f64, gamma: f64) -> Result<Field> {
    init_bumps(mesh, amplitude, &[[0.0, 0.0]], halfwidth, gamma)
}

/// Sum of smoothed indicator bumps of the given half-width around each center.
pub fn init_bumps(mesh: &Mesh, amplitude: f64, centers: &[[f64; 2]], halfwidth: f64, gamma: f64) -> Result<Field> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let values = (0..mesh.n_nodes())
        .map(|i| {
            let p = mesh.point(i);
            centers
                .iter()
                .map(|c| {
                    let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    amplitude * heaviside(halfwidth - d2.sqrt(), gamma)
                })
                .sum()
        })
        .collect();
    Field::new(values)
}

/// Pattern and scatter tables for the coupled system; values are refilled
/// in place every step.
#[derive(Debug, Clone)]
pub struct ImexAssembler {
    matrix: CsrMatrix,
    // per cell, per (a, b) local pair: slots of (rr, rb, br, bb)
    slots: Vec<[usize; 4]>,
    local_grad: Vec<f64>,
    local_mass: Vec<f64>,
    nv: usize,
    edges: Vec<(usize, usize, f64)>,
    // per edge: slots for node pairs (i,i), (i,j), (j,i), (j,j), each as (rr, rb, br, bb)
    edge_slots: Vec<[[usize; 4]; 4]>,
}

impl ImexAssembler {
    pub fn new(mesh: &Mesh, mass: MassMatrix) -> Result<Self> {
        let nv = mesh.dim() + 1;
        let n = mesh.n_nodes();
        let mut triplets = Vec::with_capacity(mesh.n_cells() * nv * nv * 4);
        for v in mesh.cells() {
            for &i in v {
                for &j in v {
                    for (p, q) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        triplets.push((2 * i + p, 2 * j + q, 0.0));
                    }
                }
            }
        }
        let matrix = CsrMatrix::from_triplets(2 * n, &triplets)?;
        let mut slots = Vec::with_capacity(mesh.n_cells() * nv * nv);
        let mut local_grad = Vec::with_capacity(mesh.n_cells() * nv * nv);
        let mut local_mass = Vec::with_capacity(mesh.n_cells() * nv * nv);
        for c in 0..mesh.n_cells() {
            let v = mesh.cell(c);
            let g = mesh.cell_gradients(c);
            let m = mesh.cell_measure(c);
            for a in 0..nv {
                for bb in 0..nv {
                    let (i, j) = (v[a], v[bb]);
                    let slot = |p: usize, q: usize| matrix.position(2 * i + p, 2 * j + q).unwrap();
                    slots.push([slot(0, 0), slot(0, 1), slot(1, 0), slot(1, 1)]);
                    local_grad.push(m * (g[a][0] * g[bb][0] + g[a][1] * g[bb][1]));
                    local_mass.push(match (mass, a == bb) {
                        (MassMatrix::Lumped, true) => m / nv as f64,
                        (MassMatrix::Lumped, false) => 0.0,
                        (MassMatrix::Consistent, true) => 2.0 * m / (nv * (nv + 1)) as f64,
                        (MassMatrix::Consistent, false) => m / (nv * (nv + 1)) as f64,
                    });
                }
            }
        }
        // edge conductances κ_ij = −Σ_cells ∫∇φ_i·∇φ_j for the upwind flux
        let mut edge_t = Vec::new();
        for (k, v) in mesh.cells().enumerate() {
            for a in 0..nv {
                for bb in a + 1..nv {
                    edge_t.push((v[a].min(v[bb]), v[a].max(v[bb]), -local_grad[k * nv * nv + a * nv + bb]));
                }
            }
        }
        let kappa = CsrMatrix::from_triplets(n, &edge_t)?;
        let mut edges = Vec::new();
        for i in 0..n {
            for (j, w) in kappa.row(i) {
                edges.push((i, j, w));
            }
        }
        let edge_slots = edges
            .iter()
            .map(|&(i, j, _)| {
                [(i, i), (i, j), (j, i), (j, j)].map(|(a, c)| {
                    [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(p, q)| matrix.position(2 * a + p, 2 * c + q).unwrap())
                })
            })
            .collect();
        Ok(Self {
            matrix,
            slots,
            local_grad,
            local_mass,
            nv,
            edges,
            edge_slots,
        })
    }

    /// Fills the system matrix and right-hand side for one step from `s`.
    pub fn assemble(
        &mut self,
        model: &Model,
        s: &State,
        tau: f64,
        transport: Transport,
    ) -> Result<(SparseSystem, Vec<f64>)> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        let mesh = model.mesh();
        let p = model.params();
        let v_pot = model.potential();
        let n = mesh.n_nodes();
        let nv = self.nv;
        let te = tau * p.eps;
        let pr: Vec<f64> = (0..n).map(|i| p.c11 * s.ur[i] - s.ub[i] + v_pot[i]).collect();
        let pb: Vec<f64> = (0..n).map(|i| p.c22 * s.ub[i] - s.ur[i] + v_pot[i]).collect();

        self.matrix.values_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut rhs = vec![0.0; 2 * n];
        for c in 0..mesh.n_cells() {
            let v = mesh.cell(c);
            let rbar = v.iter().map(|&i| s.r[i]).sum::<f64>() / nv as f64;
            let bbar = v.iter().map(|&i| s.b[i]).sum::<f64>() / nv as f64;
            let coef = [te * (1.0 - bbar), te * rbar, te * p.d * bbar, te * p.d * (1.0 - rbar)];
            let mob = [rbar * (1.0 - rbar - bbar), p.d * bbar * (1.0 - rbar - bbar)];
            for a in 0..nv {
                for bb in 0..nv {
                    let k = (c * nv + a) * nv + bb;
                    let (g, m) = (self.local_grad[k], self.local_mass[k]);
                    let sl = self.slots[k];
                    let vals = self.matrix.values_mut();
                    if transport == Transport::Balanced {
                        vals[sl[0]] += m;
                        vals[sl[3]] += m;
                    } else {
                        vals[sl[0]] += m + coef[0] * g;
                        vals[sl[1]] += coef[1] * g;
                        vals[sl[2]] += coef[2] * g;
                        vals[sl[3]] += m + coef[3] * g;
                    }
                    let (i, j) = (v[a], v[bb]);
                    rhs[2 * i] += m * s.r[j];
                    rhs[2 * i + 1] += m * s.b[j];
                    if transport == Transport::Central {
                        rhs[2 * i] -= tau * mob[0] * g * pr[j];
                        rhs[2 * i + 1] -= tau * mob[1] * g * pb[j];
                    }
                }
            }
        }
        if transport == Transport::Upwind {
            for &(i, j, kappa) in &self.edges {
                let fr = upwind_flux(kappa, pr[i] - pr[j], s.r[i], s.r[j], s.rho[i], s.rho[j]);
                let fb = p.d * upwind_flux(kappa, pb[i] - pb[j], s.b[i], s.b[j], s.rho[i], s.rho[j]);
                rhs[2 * i] -= tau * fr;
                rhs[2 * j] += tau * fr;
                rhs[2 * i + 1] -= tau * fb;
                rhs[2 * j + 1] += tau * fb;
            }
        }
        if transport == Transport::Balanced {
            for (e, &(i, j, kappa)) in self.edges.iter().enumerate() {
                let rm = log_mean(s.r[i], s.r[j]);
                let bm = log_mean(s.b[i], s.b[j]);
                let vm = log_mean(1.0 - s.rho[i], 1.0 - s.rho[j]);
                // r-flux i→j: κ[ε((vm+rm)Δr + rm·Δb) + rm·vm·ΔP_r], Δ = (·)_i − (·)_j
                let (rr, rb) = (te * kappa * (vm + rm), te * kappa * rm);
                let (bb, br) = (te * p.d * kappa * (vm + bm), te * p.d * kappa * bm);
                let vals = self.matrix.values_mut();
                for (k, sign) in [(0, 1.0), (1, -1.0), (2, -1.0), (3, 1.0)] {
                    let sl = self.edge_slots[e][k];
                    vals[sl[0]] += sign * rr;
                    vals[sl[1]] += sign * rb;
                    vals[sl[2]] += sign * br;
                    vals[sl[3]] += sign * bb;
                }
                let fr = kappa * rm * vm * (pr[i] - pr[j]);
                let fb = p.d * kappa * bm * vm * (pb[i] - pb[j]);
                rhs[2 * i] -= tau * fr;
                rhs[2 * j] += tau * fr;
                rhs[2 * i + 1] -= tau * fb;
                rhs[2 * j + 1] += tau * fb;
            }
        }
        Ok((SparseSystem::new(self.matrix.clone(), false), rhs))
    }
}

/// `(a − b)/(ln a − ln b)`, zero if either argument is not positive.
fn log_mean(a: f64, b: f64) -> f64 {
    if !(a > 0.0 && b > 0.0) {
        return 0.0;
    }
    let d = a - b;
    let m = 0.5 * (a + b);
    if d.abs() < 1e-4 * m {
        // series in (d/2m)²; exact to rounding below this threshold
        let x = (d / (2.0 * m)).powi(2);
        m * (1.0 - x / 3.0 - 4.0 * x * x / 45.0)
    } else {
        d / (d / b).ln_1p()
    }
}

/// Flux out of node i towards j: density from the upwind node, vacancy from
/// the downwind one.
fn upwind_flux(kappa: f64, dp: f64, xi: f64, xj: f64, rho_i: f64, rho_j: f64) -> f64 {
    let mob = if dp > 0.0 {
        xi * (1.0 - rho_j)
    } else {
        xj * (1.0 - rho_i)
    };
    kappa * mob * dp
}

/// One-shot assembly; see [`ImexAssembler`] for the reusable form.
pub fn assemble_imex(
    model: &Model,
    s: &State,
    tau: f64,
    mass: MassMatrix,
    transport: Transport,
) -> Result<(SparseSystem, Vec<f64>)> {
    ImexAssembler::new(model.mesh(), mass)?.assemble(model, s, tau, transport)
}

/// Time stepper bound to one model and configuration.
pub struct Stepper<'a, 'm> {
    model: &'a Model<'m>,
    cfg: EvolveConfig,
    asm: ImexAssembler,
    sol: Vec<f64>,
}

impl<'a, 'm> Stepper<'a, 'm> {
    pub fn new(model: &'a Model<'m>, cfg: EvolveConfig) -> Result<Self> {
        cfg.validate()?;
        let asm = ImexAssembler::new(model.mesh(), cfg.mass)?;
        let sol = vec![0.0; 2 * model.mesh().n_nodes()];
        Ok(Self { model, cfg, asm, sol })
    }

    pub fn config(&self) -> &EvolveConfig {
        &self.cfg
    }

    pub fn step(&mut self, s: &State) -> Result<(State, StepReport)> {
        let mesh = self.model.mesh();
        let n = mesh.n_nodes();
        let tau = self.cfg.tau;
        let (system, rhs) = self.asm.assemble(self.model, s, tau, self.cfg.transport)?;
        for i in 0..n {
            self.sol[2 * i] = s.r[i];
            self.sol[2 * i + 1] = s.b[i];
        }
        let stats = LinearSolver::new(system).solve_into(&rhs, &mut self.sol, self.cfg.solver_tol)?;
        let mut r: Vec<f64> = (0..n).map(|i| self.sol[2 * i]).collect();
        let mut b: Vec<f64> = (0..n).map(|i| self.sol[2 * i + 1]).collect();
        if let Some(i) = (0..2 * n).find(|&k| !self.sol[k].is_finite()) {
            return Err(Error::NonFinite { node: i / 2 });
        }

        let t = s.t + tau;
        let (violation, node) = worst_violation(&r, &b);
        let mut clamped = false;
        if violation > self.cfg.violation_tol {
            if !self.cfg.clamp {
                return Err(Error::StateViolation {
                    node,
                    time: t,
                    magnitude: violation,
                });
            }
            clamp_simplex(&mut r, &mut b);
            clamped = true;
        }
        let drift = (integrate(mesh, &r)? - integrate(mesh, &s.r)?)
            .abs()
            .max((integrate(mesh, &b)? - integrate(mesh, &s.b)?).abs());
        if !clamped && drift > self.cfg.mass_tol {
            return Err(Error::ConstraintViolation {
                node,
                what: "mass drift",
                magnitude: drift,
            });
        }
        let change = l2_distance(mesh, &r, &s.r) + l2_distance(mesh, &b, &s.b);
        let next = State::at_time(self.model, t, Field::new(r)?, Field::new(b)?)?;
        let slack = if clamped { 0.0 } else { self.cfg.violation_tol.max(0.0) } + 1e-12;
        let energy = next.energy(self.model, slack)?;
        Ok((
            next,
            StepReport {
                tau,
                solver_iterations: stats.iterations,
                solver_residual: stats.relative_residual,
                mass_drift: drift,
                violation,
                violation_node: node,
                clamped,
                change,
                energy,
            },
        ))
    }
}

fn worst_violation(r: &[f64], b: &[f64]) -> (f64, usize) {
    let mut worst = (f64::NEG_INFINITY, 0);
    for (i, (&ri, &bi)) in r.iter().zip(b).enumerate() {
        let v = (-ri).max(-bi).max(ri + bi - 1.0);
        if v > worst.0 {
            worst = (v, i);
        }
    }
    worst
}

fn clamp_simplex(r: &mut [f64], b: &mut [f64]) {
    for (ri, bi) in r.iter_mut().zip(b.iter_mut()) {
        *ri = ri.max(0.0);
        *bi = bi.max(0.0);
        let s = *ri + *bi;
        if s > 1.0 {
            *ri /= s;
            *bi /= s;
        }
    }
}

pub const TRACE_COLUMNS: [&str; 17] = [
    "step",
    "t",
    "F_E",
    "F_0",
    "F_C",
    "total",
    "flow_energy",
    "mass_r",
    "mass_b",
    "max_violation",
    "mass_drift",
    "solver_residual",
    "solver_iterations",
    "err_l2",
    "norm_r",
    "norm_b",
    "overlap",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Reached `t_end`.
    EndTime,
    /// Successive iterates closer than `stop_tol`.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub r: Field,
    pub b: Field,
}

#[derive(Debug, Clone)]
pub struct EvolveResult {
    pub state: State,
    pub trace: Table,
    pub snapshots: Vec<Snapshot>,
    pub steps: usize,
    pub stop: StopReason,
    pub last_report: Option<StepReport>,
    /// Largest one-step increase of the dissipated energy over the whole run.
    pub max_energy_increase: f64,
    pub max_mass_drift: f64,
    pub max_violation: f64,
    pub clamped_steps: usize,
}

fn trace_row(mesh: &Mesh, step: usize, s: &State, e: &EnergyBreakdown, rep: Option<&StepReport>) -> Vec<f64> {
    let (viol, _) = s.violation();
    vec![
        step as f64,
        s.t,
        e.entropic,
        e.interaction,
        e.confinement,
        e.total,
        e.flow_energy(),
        mesh.weights().iter().zip(s.r.iter()).map(|(w, v)| w * v).sum(),
        mesh.weights().iter().zip(s.b.iter()).map(|(w, v)| w * v).sum(),
        viol,
        rep.map_or(0.0, |r| r.mass_drift),
        rep.map_or(0.0, |r| r.solver_residual),
        rep.map_or(0.0, |r| r.solver_iterations as f64),
        rep.map_or(f64::NAN, |r| r.change),
        l2_norm(mesh, &s.r),
        l2_norm(mesh, &s.b),
        inner(mesh, &s.r, &s.b),
    ]
}

/// Steps from `initial` until `t_end` or until the iterates stagnate below
/// `stop_tol`.
pub fn run(model: &Model, initial: State, cfg: &EvolveConfig) -> Result<EvolveResult> {
    let mesh = model.mesh();
    let mut stepper = Stepper::new(model, cfg.clone())?;
    let mut trace = Table::new(&TRACE_COLUMNS);
    let mut snapshots = Vec::new();
    let e0 = initial.energy(model, cfg.violation_tol + 1e-12)?;
    trace.push(trace_row(mesh, 0, &initial, &e0, None));
    let want_snapshot = |step: usize, t_prev: f64, t: f64| {
        cfg.snapshot_every.is_some_and(|k| step % k == 0)
            || cfg
                .snapshot_times
                .iter()
                .any(|&ts| ts > t_prev + 1e-12 * ts.abs().max(1.0) && ts <= t + 1e-9 * cfg.tau)
    };
    if cfg.snapshot_times.iter().any(|&ts| ts <= 0.0) || cfg.snapshot_every.is_some() {
        snapshots.push(Snapshot {
            step: 0,
            t: initial.t,
            r: initial.r.clone(),
            b: initial.b.clone(),
        });
    }

    let n_steps = ((cfg.t_end - initial.t) / cfg.tau - 1e-9).ceil().max(1.0) as usize;
    let t0 = initial.t;
    let mut state = initial;
    let mut prev_flow = e0.flow_energy();
    let mut out = EvolveResult {
        state: state.clone(),
        trace: Table::default(),
        snapshots: Vec::new(),
        steps: 0,
        stop: StopReason::EndTime,
        last_report: None,
        max_energy_increase: f64::NEG_INFINITY,
        max_mass_drift: 0.0,
        max_violation: state.violation().0,
        clamped_steps: 0,
    };
    for step in 1..=n_steps {
        let t_prev = state.t;
        let (next, rep) = stepper.step(&state)?;
        let flow = rep.energy.flow_energy();
        out.max_energy_increase = out.max_energy_increase.max(flow - prev_flow);
        out.max_mass_drift = out.max_mass_drift.max(rep.mass_drift);
        out.max_violation = out.max_violation.max(rep.violation);
        out.clamped_steps += rep.clamped as usize;
        prev_flow = flow;
        state = next;
        state.t = t0 + step as f64 * cfg.tau;
        let stationary = rep.change < cfg.stop_tol;
        let last = stationary || step == n_steps;
        if step % cfg.trace_every == 0 || last {
            trace.push(trace_row(mesh, step, &state, &rep.energy, Some(&rep)));
        }
        if want_snapshot(step, t_prev, state.t) {
            snapshots.push(Snapshot {
                step,
                t: state.t,
                r: state.r.clone(),
                b: state.b.clone(),
            });
        }
        out.steps = step;
        out.last_report = Some(rep);
        if stationary {
            out.stop = StopReason::Stationary;
            break;
        }
    }
    out.state = state;
    out.trace = trace;
    out.snapshots = snapshots;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{ModelParams, Potential};
    use crate::mesh::{build_disc_mesh, build_interval_mesh};

    fn params(eps: f64, c11: f64, c22: f64) -> ModelParams {
        ModelParams::coulomb(1, eps, c11, c22, 1.0 / 3.0, 1.0 / 3.0)
    }

    fn no_interaction(eps: f64) -> ModelParams {
        ModelParams {
            kernel: None,
            potential: Potential::Off,
            ..params(eps, -1.0, -1.0)
        }
    }

    fn cfg(tau: f64, t_end: f64) -> EvolveConfig {
        EvolveConfig {
            tau,
            t_end,
            ..Default::default()
        }
    }

    #[test]
    fn heaviside_examples() {
        assert_eq!(heaviside(0.0, 0.3), 0.5);
        let m = build_interval_mesh(-1.0, 1.0, 201).unwrap();
        let f = init_heaviside(&m, 1.0 / 3.0, 0.5, 0.001).unwrap();
        assert!((f[100] - 1.0 / 3.0).abs() < 1e-3);
        assert!(f[0].abs() < 1e-3 && f[200].abs() < 1e-3);
        assert!(init_heaviside(&m, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn zero_state_stays_zero() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, params(0.1, -1.0, -0.5)).unwrap();
        let s = State::new(&model, Field::zeros(41), Field::zeros(41)).unwrap();
        let (next, rep) = Stepper::new(&model, cfg(1e-3, 1.0)).unwrap().step(&s).unwrap();
        assert!(next.r.iter().chain(next.b.iter()).all(|&v| v == 0.0));
        assert_eq!(rep.mass_drift, 0.0);
    }

    #[test]
    fn no_flux_leaves_state_unchanged() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(0.0)).unwrap();
        let r = m.field_from_fn(|x| 0.2 + 0.1 * x[0]);
        let b = m.field_from_fn(|x| 0.3 - 0.2 * x[0] * x[0]);
        let s = State::new(&model, r.clone(), b.clone()).unwrap();
        let (next, _) = Stepper::new(&model, cfg(1e-2, 1.0)).unwrap().step(&s).unwrap();
        for i in 0..41 {
            assert!((next.r[i] - r[i]).abs() < 1e-13);
            assert!((next.b[i] - b[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(0.5)).unwrap();
        let s = State::new(&model, Field::constant(41, 0.3), Field::constant(41, 0.2)).unwrap();
        let (next, _) = Stepper::new(&model, cfg(1e-2, 1.0)).unwrap().step(&s).unwrap();
        assert!(next.r.iter().all(|&v| (v - 0.3).abs() < 1e-13));
        assert!(next.b.iter().all(|&v| (v - 0.2).abs() < 1e-13));
    }

    #[test]
    fn stationary_input_stops_after_one_step() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(0.5)).unwrap();
        let s = State::new(&model, Field::constant(41, 0.3), Field::constant(41, 0.2)).unwrap();
        let out = run(&model, s, &cfg(1e-2, 1.0)).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.stop, StopReason::Stationary);
    }

    #[test]
    fn heat_limit_relaxes_monotonically() {
        let m = build_interval_mesh(-1.0, 1.0, 101).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(1.0)).unwrap();
        let r = m.field_from_fn(|x| 0.3 + 0.2 * (std::f64::consts::PI * x[0] / 2.0).sin());
        let mean = integrate(&m, &r).unwrap() / m.volume();
        let target = Field::constant(101, mean);
        let mut s = State::new(&model, r, Field::zeros(101)).unwrap();
        for mass in [MassMatrix::Consistent, MassMatrix::Lumped] {
            let mut st = Stepper::new(&model, EvolveConfig { mass, ..cfg(1e-3, 1.0) }).unwrap();
            let mut prev = l2_distance(&m, &s.r, &target);
            for _ in 0..200 {
                let (next, rep) = st.step(&s).unwrap();
                let d = l2_distance(&m, &next.r, &target);
                assert!(d < prev);
                assert!(rep.mass_drift <= 1e-12);
                prev = d;
                s = next;
            }
            // slowest no-flux mode decays like exp(−(π/2)² t)
            assert!(prev < 0.2 * (-std::f64::consts::PI.powi(2) / 4.0 * 0.2).exp() * 1.05);
            s = State::new(
                &model,
                m.field_from_fn(|x| 0.3 + 0.2 * (std::f64::consts::PI * x[0] / 2.0).sin()),
                Field::zeros(101),
            )
            .unwrap();
        }
    }

    #[test]
    fn transport_update_scales_with_d() {
        let m = build_interval_mesh(-1.0, 1.0, 81).unwrap();
        let r = m.field_from_fn(|x| 0.3 * (-4.0 * (x[0] - 0.2).powi(2)).exp());
        let b = m.field_from_fn(|x| 0.3 * (-4.0 * (x[0] + 0.2).powi(2)).exp());
        let tau = 1e-4;
        let update = |d: f64| {
            let p = ModelParams {
                d,
                ..params(0.0, -1.0, -0.5)
            };
            let model = Model::new_unchecked(&m, p).unwrap();
            let s = State::new(&model, r.clone(), b.clone()).unwrap();
            let (next, _) = Stepper::new(&model, cfg(tau, 1.0)).unwrap().step(&s).unwrap();
            (next.r.zip_map(&r, |x, y| x - y), next.b.zip_map(&b, |x, y| x - y))
        };
        let (dr1, db1) = update(1.0);
        let (dr2, db2) = update(2.0);
        let scale = db1.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(scale > 1e-6);
        for i in 0..81 {
            assert!((db2[i] - 2.0 * db1[i]).abs() < 1e-12);
            assert!((dr2[i] - dr1[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_data_stays_symmetric() {
        let m = build_interval_mesh(-1.0, 1.0, 201).unwrap();
        let model = Model::new(&m, params(0.02, -1.0, -0.5)).unwrap();
        let r = init_heaviside(&m, 1.0 / 3.0, 0.5, 0.01).unwrap();
        let b = r.map(|v| 0.9 * v);
        let out = run(&model, State::new(&model, r, b).unwrap(), &cfg(1e-3, 0.2)).unwrap();
        let s = &out.state;
        for i in 0..201 {
            assert!((s.r[i] - s.r[200 - i]).abs() < 1e-8);
            assert!((s.b[i] - s.b[200 - i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mass_and_energy_along_coupled_run() {
        let m = build_interval_mesh(-1.0, 1.0, 201).unwrap();
        let model = Model::new(&m, params(0.02, -1.0, -0.5)).unwrap();
        let r = init_heaviside(&m, 1.0 / 3.0, 0.5, 0.001).unwrap();
        for (mass, transport) in [
            (MassMatrix::Lumped, Transport::Upwind),
            (MassMatrix::Consistent, Transport::Central),
            (MassMatrix::Lumped, Transport::Balanced),
        ] {
            let c = EvolveConfig {
                mass,
                transport,
                ..cfg(5e-4, 0.5)
            };
            let out = run(&model, State::new(&model, r.clone(), r.clone()).unwrap(), &c).unwrap();
            assert!(out.max_mass_drift <= 1e-10);
            assert!(out.max_energy_increase <= 1e-8, "{}", out.max_energy_increase);
            assert!(out.max_violation <= 1e-8);
            let e = out.trace.column("flow_energy").unwrap();
            assert!(e.last().unwrap() < &e[0]);
        }
    }

    #[test]
    fn log_mean_branches_agree() {
        assert_eq!(log_mean(0.0, 0.4), 0.0);
        assert_eq!(log_mean(0.3, 0.3), 0.3);
        let exact = |a: f64, b: f64| (a - b) / ((a - b) / b).ln_1p();
        // the series branch must meet the closed form at the switch-over
        for (a, b) in [
            (0.2, 0.2 * (1.0 + 9.9e-5)),
            (0.2, 0.2 * (1.0 + 1.01e-4)),
            (0.2 * (1.0 + 9.9e-5), 0.2),
        ] {
            assert!((log_mean(a, b) - exact(a, b)).abs() <= 1e-13 * a.max(b), "{a} {b}");
        }
        assert!((log_mean(1e-9, 0.5) - exact(1e-9, 0.5)).abs() <= 1e-16);
        assert!(log_mean(0.1, 0.4) > 0.1 && log_mean(0.1, 0.4) < 0.25);
    }

    #[test]
    fn balanced_steady_state_is_critical_point() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let r = init_heaviside(&m, 1.0 / 3.0, 0.5, 0.001).unwrap();
        let mr = integrate(&m, &r).unwrap();
        let p = ModelParams::coulomb(1, 0.02, -1.0, -0.5, mr, mr);
        let model = Model::new(&m, p).unwrap();
        let c = EvolveConfig {
            transport: Transport::Balanced,
            ..cfg(5e-3, 400.0)
        };
        let out = run(&model, State::new(&model, r.clone(), r).unwrap(), &c).unwrap();
        assert_eq!(out.stop, StopReason::Stationary);
        assert!(out.max_energy_increase <= 1e-12);
        let fv = model.first_variation_residual(&out.state.r, &out.state.b, 0.5).unwrap();
        assert!(
            fv.dev_r <= 1e-8 * fv.scale_r && fv.dev_b <= 1e-8 * fv.scale_b,
            "{} {}",
            fv.dev_r,
            fv.dev_b
        );
    }

    #[test]
    fn upwind_conserves_mass_and_sign() {
        let m = build_interval_mesh(-1.0, 1.0, 101).unwrap();
        let model = Model::new(&m, params(0.0, -2.0, -0.5)).unwrap();
        let r = init_heaviside(&m, 0.4, 0.3, 0.01).unwrap();
        let c = EvolveConfig {
            transport: Transport::Upwind,
            mass: MassMatrix::Lumped,
            ..cfg(1e-3, 0.3)
        };
        let out = run(&model, State::new(&model, r.clone(), r).unwrap(), &c).unwrap();
        assert!(out.max_mass_drift <= 1e-10);
        assert!(out.max_violation <= 1e-8);
    }

    #[test]
    fn disc_step_conserves_mass() {
        let m = build_disc_mesh(2.0, 0.25).unwrap();
        let p = ModelParams::coulomb(2, 0.02, -1.0, -0.5, 1.0, 1.0);
        let model = Model::new_unchecked(&m, p).unwrap();
        let r = m.field_from_fn(|x| 0.3 + 0.05 * x[0]);
        let b = m.field_from_fn(|x| 0.3 - 0.05 * x[1]);
        let out = run(&model, State::new(&model, r, b).unwrap(), &cfg(5e-3, 0.05)).unwrap();
        assert!(out.max_mass_drift <= 1e-10);
        assert_eq!(out.steps, 10);
        assert!(out.max_energy_increase <= 1e-8);
    }

    #[test]
    fn violation_aborts_or_clamps() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(1.0)).unwrap();
        // sharp spike under a consistent mass matrix undershoots next to it
        let mut r = vec![0.0; 41];
        r[20] = 0.9;
        let s = State::new(&model, Field::new(r).unwrap(), Field::zeros(41)).unwrap();
        let err = Stepper::new(
            &model,
            EvolveConfig {
                mass: MassMatrix::Consistent,
                ..cfg(1e-5, 1.0)
            },
        )
        .unwrap()
        .step(&s)
        .unwrap_err();
        assert!(matches!(err, Error::StateViolation { .. }));
        let (next, rep) = Stepper::new(
            &model,
            EvolveConfig {
                clamp: true,
                mass: MassMatrix::Consistent,
                ..cfg(1e-5, 1.0)
            },
        )
        .unwrap()
        .step(&s)
        .unwrap();
        assert!(rep.clamped && rep.violation > 1e-8);
        assert!(next.r.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn snapshots_at_requested_times() {
        let m = build_interval_mesh(-1.0, 1.0, 41).unwrap();
        let model = Model::new_unchecked(&m, no_interaction(0.1)).unwrap();
        let r = m.field_from_fn(|x| 0.3 + 0.1 * x[0]);
        let c = EvolveConfig {
            snapshot_times: vec![0.01, 0.025],
            trace_every: 5,
            ..cfg(1e-3, 0.03)
        };
        let out = run(&model, State::new(&model, r, Field::zeros(41)).unwrap(), &c).unwrap();
        let times: Vec<f64> = out.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(out.snapshots.iter().map(|s| s.step).collect::<Vec<_>>(), vec![10, 25]);
        assert!((times[0] - 0.01).abs() < 1e-12);
        assert_eq!(out.trace.len(), 7);
    }
}
