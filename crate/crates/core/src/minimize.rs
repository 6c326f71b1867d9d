//! Constrained minimization of the energy by an ADMM splitting into a box
//! block and a mass block, each solved by projected gradient descent.
//!
//! The discrete Lagrangian uses the lumped inner product throughout:
//!
//! ```text
//! L = εF^E(r1,b1) + ∫(r1+b1)V + w·F^0(r2,b2)
//!     + ∫λ_r(r1−r2) + ∫λ_b(b1−b2) + μ/2 (‖r1−r2‖² + ‖b1−b2‖²)
//! ```
//!
//! Gradients are Riesz representatives in that inner product, so for P1
//! fields they are nodal values and both projections act nodewise or by
//! constant shifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{check_simplex, EnergyBreakdown, Model, ModelParams};
use crate::error::{Error, Result};
use crate::mesh::{inner, integrate, l2_distance, Field, Mesh};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxVariant {
    /// Clamp, then split the difference along `r + b = 1 − δ`.
    Paper,
    /// Nodewise Euclidean projection onto the δ-triangle.
    Exact,
}

/// How the box block is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSolver {
    ProjectedGradient,
    /// The box block separates by node; each 2×2 convex problem is solved
    /// to machine precision by Newton in the interior and bisection on the edges.
    Nodewise,
}

/// Weight of the interaction energy inside the Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// `w = 1`: block-2 gradient `2(c11 K∗r − K∗b) + ...`.
    Exact,
    /// `w = ½`: block-2 gradient `c11 K∗r − K∗b + ...` as printed.
    Printed,
}

impl GradientForm {
    pub fn interaction_weight(self) -> f64 {
        match self {
            GradientForm::Exact => 1.0,
            GradientForm::Printed => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub mu: f64,
    pub delta: f64,
    pub step: f64,
    pub inner_iters: usize,
    pub inner_tol: f64,
    pub armijo: bool,
    pub max_outer: usize,
    pub tol: f64,
    /// Also require the dual residual below this before stopping.
    pub dual_tol: Option<f64>,
    pub box_variant: BoxVariant,
    pub box_solver: BoxSolver,
    pub gradient: GradientForm,
    /// Check box and mass feasibility after every outer iteration.
    pub assert_invariants: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            delta: 1e-6,
            step: 0.01,
            inner_iters: 200,
            inner_tol: 1e-10,
            armijo: false,
            max_outer: 5000,
            tol: 1e-8,
            dual_tol: None,
            box_variant: BoxVariant::Exact,
            box_solver: BoxSolver::ProjectedGradient,
            gradient: GradientForm::Exact,
            assert_invariants: true,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return bad(format!("mu = {} must be positive", self.mu));
        }
        if !(0.0..=0.49).contains(&self.delta) {
            return bad(format!("delta = {} outside [0, 0.49]", self.delta));
        }
        if params.eps > 0.0 && self.delta == 0.0 {
            return bad("eps > 0 needs delta > 0 to keep the entropy differentiable".into());
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return bad(format!("step = {} must be positive", self.step));
        }
        if self.box_solver == BoxSolver::Nodewise && self.box_variant == BoxVariant::Paper {
            return bad("the nodewise box solver minimizes over the true δ-triangle; use box_variant = exact".into());
        }
        if !(self.tol > 0.0) || !(self.inner_tol >= 0.0) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub r1: Vec<f64>,
    pub b1: Vec<f64>,
    pub r2: Vec<f64>,
    pub b2: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub lambda_b: Vec<f64>,
    pub mu: f64,
    pub delta: f64,
    pub iter: usize,
    pub res_r: f64,
    pub res_b: f64,
    /// `μ‖x2 − x2_prev‖` of the last step.
    pub dual_res: f64,
}

impl AdmmState {
    /// Box block from the box projection of the start, mass block from its
    /// mass projection, zero multipliers.
    pub fn new(mesh: &Mesh, params: &ModelParams, r: &[f64], b: &[f64], cfg: &AdmmConfig) -> Result<Self> {
        mesh.check(r)?;
        mesh.check(b)?;
        let (r1, b1) = project_box(r, b, cfg.delta, cfg.box_variant)?;
        let (r2, b2) = project_mass(mesh, r, b, params);
        let n = mesh.n_nodes();
        let mut s = Self {
            r1,
            b1,
            r2,
            b2,
            lambda_r: vec![0.0; n],
            lambda_b: vec![0.0; n],
            mu: cfg.mu,
            delta: cfg.delta,
            iter: 0,
            res_r: 0.0,
            res_b: 0.0,
            dual_res: f64::INFINITY,
        };
        s.update_residuals(mesh);
        Ok(s)
    }

    fn update_residuals(&mut self, mesh: &Mesh) {
        self.res_r = l2_distance(mesh, &self.r1, &self.r2);
        self.res_b = l2_distance(mesh, &self.b1, &self.b2);
    }

    pub fn primal_residual(&self) -> f64 {
        self.res_r.max(self.res_b)
    }
}

/// Shifts each field by a constant so its mass hits the target.
pub fn project_mass(mesh: &Mesh, r: &[f64], b: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let vol = mesh.volume();
    let shift = |f: &[f64], m: f64| {
        let c = (integrate(mesh, f).unwrap_or(0.0) - m) / vol;
        f.iter().map(|v| v - c).collect::<Vec<f64>>()
    };
    (shift(r, params.m_r), shift(b, params.m_b))
}

fn project_triangle(p: f64, q: f64, delta: f64) -> (f64, f64) {
    let s = 1.0 - 3.0 * delta;
    let (x, y) = (p - delta, q - delta);
    let (cx, cy) = (x.max(0.0), y.max(0.0));
    if cx + cy <= s {
        return (cx + delta, cy + delta);
    }
    let t = (0.5 * (x - y + s)).clamp(0.0, s);
    (t + delta, (s - t) + delta)
}

pub fn project_box(r: &[f64], b: &[f64], delta: f64, variant: BoxVariant) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=0.49).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside [0, 0.49]")));
    }
    if r.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: r.len(),
            got: b.len(),
        });
    }
    let mut ro = Vec::with_capacity(r.len());
    let mut bo = Vec::with_capacity(r.len());
    for (&p, &q) in r.iter().zip(b) {
        let (x, y) = match variant {
            BoxVariant::Exact => project_triangle(p, q, delta),
            BoxVariant::Paper => {
                let rt = p.clamp(delta, 1.0 - delta);
                let bt = q.clamp(delta, 1.0 - delta);
                (0.5 * ((1.0 - delta) - (bt - rt)), 0.5 * ((1.0 - delta) + (bt - rt)))
            }
        };
        ro.push(x);
        bo.push(y);
    }
    Ok((ro, bo))
}

fn coupling(mesh: &Mesh, s: &AdmmState, r1: &[f64], b1: &[f64], r2: &[f64], b2: &[f64]) -> f64 {
    let w = mesh.weights();
    let mut acc = 0.0;
    for i in 0..w.len() {
        let (dr, db) = (r1[i] - r2[i], b1[i] - b2[i]);
        acc += w[i] * (s.lambda_r[i] * dr + s.lambda_b[i] * db + 0.5 * s.mu * (dr * dr + db * db));
    }
    acc
}

fn block1_value(model: &Model, s: &AdmmState, r: &[f64], b: &[f64]) -> Result<f64> {
    let fe = if model.params().eps > 0.0 {
        model.params().eps * model.entropy(r, b, 0.0)?
    } else {
        0.0
    };
    Ok(fe + model.confinement(r, b)? + coupling(model.mesh(), s, r, b, &s.r2, &s.b2))
}

fn block2_value(model: &Model, s: &AdmmState, r: &[f64], b: &[f64], weight: f64) -> Result<f64> {
    Ok(weight * model.interaction(r, b)? + coupling(model.mesh(), s, &s.r1, &s.b1, r, b))
}

/// The full augmented Lagrangian at the current state.
pub fn lagrangian(model: &Model, s: &AdmmState, form: GradientForm) -> Result<f64> {
    let w = form.interaction_weight();
    Ok(block1_value(model, s, &s.r1, &s.b1)? + w * model.interaction(&s.r2, &s.b2)?)
}

/// Gradient in the box block.
pub fn grad_block1(model: &Model, r: &[f64], b: &[f64], s: &AdmmState) -> Result<(Field, Field)> {
    let mesh = model.mesh();
    mesh.check(r)?;
    mesh.check(b)?;
    let eps = model.params().eps;
    let v = model.potential();
    let n = r.len();
    let mut gr = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    for i in 0..n {
        let (mut er, mut eb) = (0.0, 0.0);
        if eps > 0.0 {
            let void = 1.0 - r[i] - b[i];
            if !(r[i] > 0.0 && b[i] > 0.0 && void > 0.0) {
                return Err(Error::ConstraintViolation {
                    node: i,
                    what: "entropy gradient needs 0 < r, b and r + b < 1",
                    magnitude: r[i].min(b[i]).min(void),
                });
            }
            let lv = void.ln();
            er = eps * (r[i].ln() - lv);
            eb = eps * (b[i].ln() - lv);
        }
        gr.push(er + v[i] + s.lambda_r[i] + s.mu * (r[i] - s.r2[i]));
        gb.push(eb + v[i] + s.lambda_b[i] + s.mu * (b[i] - s.b2[i]));
    }
    Ok((Field::from_vec_unchecked(gr), Field::from_vec_unchecked(gb)))
}

fn grad_block2_from(
    model: &Model,
    r: &[f64],
    b: &[f64],
    ur: &[f64],
    ub: &[f64],
    s: &AdmmState,
    form: GradientForm,
) -> (Vec<f64>, Vec<f64>) {
    let p = model.params();
    let k = 2.0 * form.interaction_weight();
    let n = r.len();
    let mut gr = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    for i in 0..n {
        gr.push(k * (p.c11 * ur[i] - ub[i]) - s.lambda_r[i] + s.mu * (r[i] - s.r1[i]));
        gb.push(k * (p.c22 * ub[i] - ur[i]) - s.lambda_b[i] + s.mu * (b[i] - s.b1[i]));
    }
    (gr, gb)
}

/// Gradient in the mass block.
pub fn grad_block2(model: &Model, r: &[f64], b: &[f64], s: &AdmmState, form: GradientForm) -> Result<(Field, Field)> {
    let ur = model.convolve(r)?;
    let ub = model.convolve(b)?;
    let (gr, gb) = grad_block2_from(model, r, b, &ur, &ub, s, form);
    Ok((Field::from_vec_unchecked(gr), Field::from_vec_unchecked(gb)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Box,
    Mass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgReport {
    pub iterations: usize,
    /// `‖x − P(x − s∇)‖ / s` at exit.
    pub pg_norm: f64,
}

fn wnorm2(mesh: &Mesh, a: &[f64], b: &[f64]) -> f64 {
    inner(mesh, a, a) + inner(mesh, b, b)
}

/// Projected gradient on one block of the state, in place.
pub fn pg_solve(model: &Model, s: &mut AdmmState, block: Block, cfg: &AdmmConfig) -> Result<PgReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument(format!("step = {} must be positive", cfg.step)));
    }
    let mesh = model.mesh();
    let weight = cfg.gradient.interaction_weight();
    let params = model.params().clone();
    let (mut x, mut y) = match block {
        Block::Box => (s.r1.clone(), s.b1.clone()),
        Block::Mass => (s.r2.clone(), s.b2.clone()),
    };
    let value_at = |s: &AdmmState, x: &[f64], y: &[f64]| match block {
        Block::Box => block1_value(model, s, x, y),
        Block::Mass => block2_value(model, s, x, y, weight),
    };
    let grad_at = |s: &AdmmState, x: &[f64], y: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        match block {
            Block::Box => {
                let (a, b) = grad_block1(model, x, y, s)?;
                Ok((a.into_vec(), b.into_vec()))
            }
            Block::Mass => {
                let ux = model.convolve(x)?;
                let uy = model.convolve(y)?;
                Ok(grad_block2_from(model, x, y, &ux, &uy, s, cfg.gradient))
            }
        }
    };
    let project = |x: &[f64], y: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        match block {
            Block::Box => project_box(x, y, cfg.delta, cfg.box_variant),
            Block::Mass => Ok(project_mass(mesh, x, y, &params)),
        }
    };

    let mut value = if cfg.armijo { value_at(s, &x, &y)? } else { 0.0 };
    let mut pg_norm = f64::INFINITY;
    let mut it = 0;
    while it < cfg.inner_iters {
        let (gx, gy) = grad_at(s, &x, &y)?;
        if gx.iter().chain(&gy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: gx.iter().chain(&gy).position(|v| !v.is_finite()).unwrap() % x.len(),
            });
        }
        let trial = |step: f64| {
            let xs: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - step * g).collect();
            let ys: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - step * g).collect();
            project(&xs, &ys)
        };
        let (mut xn, mut yn) = trial(cfg.step)?;
        let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = yn.iter().zip(&y).map(|(a, b)| a - b).collect();
        pg_norm = wnorm2(mesh, &dx, &dy).sqrt() / cfg.step;
        if pg_norm <= cfg.inner_tol {
            break;
        }
        if cfg.armijo {
            let mut step = cfg.step;
            loop {
                let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let dy: Vec<f64> = yn.iter().zip(&y).map(|(a, b)| a - b).collect();
                let slope = inner(mesh, &gx, &dx) + inner(mesh, &gy, &dy);
                let vn = value_at(s, &xn, &yn);
                match vn {
                    Ok(vn) if vn.is_finite() && vn <= value + 1e-4 * slope => {
                        value = vn;
                        break;
                    }
                    _ => {}
                }
                step *= 0.5;
                if step < cfg.step * 1e-12 {
                    // no decrease available at machine precision: stationary
                    xn = x.clone();
                    yn = y.clone();
                    break;
                }
                let (a, b) = trial(step)?;
                xn = a;
                yn = b;
            }
            if xn == x && yn == y {
                it += 1;
                break;
            }
        }
        x = xn;
        y = yn;
        it += 1;
    }
    let v = value_at(s, &x, &y)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { node: 0 });
    }
    match block {
        Block::Box => {
            s.r1 = x;
            s.b1 = y;
        }
        Block::Mass => {
            s.r2 = x;
            s.b2 = y;
        }
    }
    Ok(PgReport {
        iterations: it,
        pg_norm,
    })
}

/// Per-node data of the box block: `f(r,b) = εφ(r,b) + (V+λ_r)r + (V+λ_b)b + μ/2|(r,b) − (r2,b2)|²`.
#[derive(Debug, Clone, Copy)]
struct NodeProblem {
    eps: f64,
    lin_r: f64,
    lin_b: f64,
    r2: f64,
    b2: f64,
    mu: f64,
}

impl NodeProblem {
    fn value(&self, r: f64, b: f64) -> f64 {
        let ent = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
        self.eps * (ent(r) + ent(b) + ent(1.0 - r - b))
            + self.lin_r * r
            + self.lin_b * b
            + 0.5 * self.mu * ((r - self.r2).powi(2) + (b - self.b2).powi(2))
    }

    fn grad(&self, r: f64, b: f64) -> (f64, f64) {
        let (lr, lb, ls) = if self.eps > 0.0 {
            (r.ln(), b.ln(), (1.0 - r - b).ln())
        } else {
            (0.0, 0.0, 0.0)
        };
        (
            self.eps * (lr - ls) + self.lin_r + self.mu * (r - self.r2),
            self.eps * (lb - ls) + self.lin_b + self.mu * (b - self.b2),
        )
    }

    fn hessian(&self, r: f64, b: f64) -> (f64, f64, f64) {
        let sv = 1.0 - r - b;
        (
            self.eps * (1.0 / r + 1.0 / sv) + self.mu,
            self.eps * (1.0 / b + 1.0 / sv) + self.mu,
            self.eps / sv,
        )
    }

    /// Damped Newton over the open triangle from `(r, b)`. The flag is false
    /// when `max_iter` ran out first.
    fn interior_newton(&self, mut r: f64, mut b: f64, max_iter: usize) -> ((f64, f64), bool) {
        let gtol = 1e-13 * (1.0 + self.lin_r.abs() + self.lin_b.abs() + self.mu);
        for _ in 0..max_iter {
            let (gr, gb) = self.grad(r, b);
            let gnorm = gr.abs().max(gb.abs());
            if gnorm <= gtol {
                return ((r, b), true);
            }
            let (hrr, hbb, hrb) = self.hessian(r, b);
            let det = hrr * hbb - hrb * hrb;
            let dr = -(hbb * gr - hrb * gb) / det;
            let db = -(hrr * gb - hrb * gr) / det;
            let f0 = self.value(r, b);
            let mut t = 1.0;
            loop {
                let (nr, nb) = (r + t * dr, b + t * db);
                if nr > 0.0 && nb > 0.0 && nr + nb < 1.0 {
                    let fnew = self.value(nr, nb);
                    let (ngr, ngb) = self.grad(nr, nb);
                    // near the optimum values stop resolving; the gradient still does
                    let flat = (fnew - f0).abs() <= 1e-14 * (1.0 + f0.abs());
                    if fnew <= f0 + 1e-4 * t * (gr * dr + gb * db) || (flat && ngr.abs().max(ngb.abs()) < gnorm) {
                        r = nr;
                        b = nb;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    return ((r, b), false);
                }
            }
        }
        ((r, b), false)
    }

    /// Minimizer on the segment `a + t·d`, `t ∈ [0, 1]`: safeguarded Newton
    /// on the monotone slope.
    fn segment_min(&self, a: (f64, f64), d: (f64, f64)) -> (f64, f64) {
        let at = |t: f64| (a.0 + t * d.0, a.1 + t * d.1);
        let slope = |t: f64| {
            let (x, y) = at(t);
            let (gr, gb) = self.grad(x, y);
            gr * d.0 + gb * d.1
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        if slope(lo) >= 0.0 {
            return at(lo);
        }
        if slope(hi) <= 0.0 {
            return at(hi);
        }
        let mut t = 0.5;
        for _ in 0..100 {
            let g = slope(t);
            if g > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let (x, y) = at(t);
            let (hrr, hbb, hrb) = self.hessian(x, y);
            let curv = hrr * d.0 * d.0 + 2.0 * hrb * d.0 * d.1 + hbb * d.1 * d.1;
            let mut next = t - g / curv;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-16 * t.max(1e-300) || hi - lo <= 1e-17 {
                t = next;
                break;
            }
            t = next;
        }
        at(t)
    }

    fn solve(&self, delta: f64, start: (f64, f64)) -> (f64, f64) {
        if self.eps == 0.0 {
            // isotropic quadratic: the box minimizer is the projection of the free one
            let (p, q) = (self.r2 - self.lin_r / self.mu, self.b2 - self.lin_b / self.mu);
            return project_triangle(p, q, delta);
        }
        let inside = |(r, b): (f64, f64)| r >= delta && b >= delta && r + b <= 1.0 - delta;
        let strict = |(r, b): (f64, f64)| r > 0.0 && b > 0.0 && r + b < 1.0;
        let start = if strict(start) { start } else { (1.0 / 3.0, 1.0 / 3.0) };
        let (x, ok) = self.interior_newton(start.0, start.1, 8);
        if ok && inside(x) {
            return x;
        }
        // Minimizer on each face; it is the answer when the slope into the
        // triangle is nonnegative there. At a corner one of its two faces
        // always passes this test.
        let top = 1.0 - 2.0 * delta;
        let span = top - delta;
        let faces = [
            ((delta, delta), (0.0, span), (1.0, 0.0)),
            ((delta, delta), (span, 0.0), (0.0, 1.0)),
            ((top, delta), (-span, span), (-1.0, -1.0)),
        ];
        for (a, d, normal) in faces {
            let x = self.segment_min(a, d);
            let (gr, gb) = self.grad(x.0, x.1);
            if gr * normal.0 + gb * normal.1 >= 0.0 {
                let r = x.0.max(delta);
                let b = x.1.max(delta).min(1.0 - delta - r);
                return (r, b);
            }
        }
        let centre = ((1.0 - delta) / 3.0 + delta / 3.0, (1.0 - delta) / 3.0 + delta / 3.0);
        let centre = if inside(start) { start } else { centre };
        let (x, _) = self.interior_newton(centre.0, centre.1, 200);
        let r = x.0.max(delta);
        let b = x.1.max(delta).min(1.0 - delta - r);
        (r, b)
    }
}

/// Exact minimization of the box block, node by node.
pub fn solve_box_nodewise(model: &Model, s: &mut AdmmState) -> Result<()> {
    let eps = model.params().eps;
    let v = model.potential();
    for i in 0..s.r1.len() {
        let prob = NodeProblem {
            eps,
            lin_r: v[i] + s.lambda_r[i],
            lin_b: v[i] + s.lambda_b[i],
            r2: s.r2[i],
            b2: s.b2[i],
            mu: s.mu,
        };
        let (r, b) = prob.solve(s.delta, (s.r1[i], s.b1[i]));
        if !r.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { node: i });
        }
        s.r1[i] = r;
        s.b1[i] = b;
    }
    Ok(())
}

/// Box block, mass block, then multiplier ascent.
pub fn admm_step(model: &Model, s: &mut AdmmState, cfg: &AdmmConfig) -> Result<()> {
    match cfg.box_solver {
        BoxSolver::ProjectedGradient => {
            pg_solve(model, s, Block::Box, cfg)?;
        }
        BoxSolver::Nodewise => solve_box_nodewise(model, s)?,
    }
    let (r_prev, b_prev) = (s.r2.clone(), s.b2.clone());
    pg_solve(model, s, Block::Mass, cfg)?;
    let mesh = model.mesh();
    s.dual_res = s.mu * (l2_distance(mesh, &s.r2, &r_prev).powi(2) + l2_distance(mesh, &s.b2, &b_prev).powi(2)).sqrt();
    for i in 0..s.r1.len() {
        s.lambda_r[i] += s.mu * (s.r1[i] - s.r2[i]);
        s.lambda_b[i] += s.mu * (s.b1[i] - s.b2[i]);
    }
    s.iter += 1;
    s.update_residuals(mesh);
    Ok(())
}

/// Feasibility of both blocks; the paper box map lands on `r + b = 1 − δ`
/// with components in `[δ/2, 1 − δ/2]`, so it is checked against that image.
pub fn check_feasibility(model: &Model, s: &AdmmState, variant: BoxVariant) -> Result<()> {
    let d = s.delta;
    let lo = match variant {
        BoxVariant::Exact => d,
        BoxVariant::Paper => 0.5 * d,
    };
    let tol = 1e-14;
    for i in 0..s.r1.len() {
        let (r, b) = (s.r1[i], s.b1[i]);
        if r < lo - tol || b < lo - tol {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "box block below delta",
                magnitude: lo - r.min(b),
            });
        }
        if r + b > 1.0 - d + tol {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "box block above 1 - delta",
                magnitude: r + b - 1.0 + d,
            });
        }
    }
    let p = model.params();
    let mesh = model.mesh();
    for (f, m, what) in [(&s.r2, p.m_r, "mass block r"), (&s.b2, p.m_b, "mass block b")] {
        let err = (integrate(mesh, f)? - m).abs();
        if err > 1e-10 {
            return Err(Error::ConstraintViolation {
                node: 0,
                what,
                magnitude: err,
            });
        }
    }
    Ok(())
}

pub const TRACE_COLUMNS: [&str; 7] = ["iter", "F_E", "F_0", "F_C", "total", "primal_res_r", "primal_res_b"];

#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub r: Field,
    pub b: Field,
    pub energy: EnergyBreakdown,
    pub trace: Table,
    pub converged: bool,
    pub iterations: usize,
    pub res_r: f64,
    pub res_b: f64,
}

impl AdmmResult {
    pub fn into_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.res_r.max(self.res_b),
            })
        }
    }
}

fn trace_row(model: &Model, s: &AdmmState) -> Result<Vec<f64>> {
    // block-1 fields may miss the masses slightly; entropy is still defined
    let e = model.energy_with_slack(&s.r1, &s.b1, 1e-9)?;
    Ok(vec![
        s.iter as f64,
        e.entropic,
        e.interaction,
        e.confinement,
        e.total,
        s.res_r,
        s.res_b,
    ])
}

/// Iterates [`admm_step`] from `(r0, b0)` until both primal residuals drop
/// below `cfg.tol` or the outer budget runs out.
pub fn admm_run(model: &Model, r0: &[f64], b0: &[f64], cfg: &AdmmConfig) -> Result<AdmmResult> {
    let params = model.params();
    let mesh = model.mesh();
    params.validate(mesh)?;
    cfg.validate(params)?;
    let mut s = AdmmState::new(mesh, params, r0, b0, cfg)?;
    let mut trace = Table::new(&TRACE_COLUMNS);
    trace.push(trace_row(model, &s)?);
    let mut converged = false;
    while s.iter < cfg.max_outer {
        admm_step(model, &mut s, cfg)?;
        if cfg.assert_invariants {
            check_feasibility(model, &s, cfg.box_variant)?;
        }
        trace.push(trace_row(model, &s)?);
        if s.primal_residual() <= cfg.tol && cfg.dual_tol.map_or(true, |t| s.dual_res <= t) {
            converged = true;
            break;
        }
    }
    let (r, b) = project_mass(mesh, &s.r1, &s.b1, params);
    // the mass correction may push values past the box by its own size
    let shift = (r[0] - s.r1[0]).abs() + (b[0] - s.b1[0]).abs();
    let energy = model.energy_with_slack(&r, &b, 1e-6 + 2.0 * shift)?;
    Ok(AdmmResult {
        r: Field::from_vec_unchecked(r),
        b: Field::from_vec_unchecked(b),
        energy,
        trace,
        converged,
        iterations: s.iter,
        res_r: s.res_r,
        res_b: s.res_b,
    })
}

/// Nodewise uniform values in `[0, 0.49]` shifted onto the target masses;
/// `tilt` multiplies `r` by `0.3x + 1` first to break the mirror symmetry.
pub fn random_init(mesh: &Mesh, params: &ModelParams, seed: u64, tilt: bool) -> (Field, Field) {
    let tilt = tilt.then_some(Tilt {
        species: Species::R,
        slope: 0.3,
        offset: 1.0,
    });
    random_init_tilted(mesh, params, seed, tilt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    R,
    B,
}

/// Multiplies one species' random data by `slope·x + offset` before the mass
/// projection, to break the mirror symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tilt {
    pub species: Species,
    pub slope: f64,
    pub offset: f64,
}

pub fn random_init_tilted(mesh: &Mesh, params: &ModelParams, seed: u64, tilt: Option<Tilt>) -> (Field, Field) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mesh.n_nodes();
    let mut r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=0.49)).collect();
    let mut b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=0.49)).collect();
    if let Some(t) = tilt {
        let target = match t.species {
            Species::R => &mut r,
            Species::B => &mut b,
        };
        for (i, v) in target.iter_mut().enumerate() {
            *v *= t.slope * mesh.x(i) + t.offset;
        }
    }
    let (r, b) = project_mass(mesh, &r, &b, params);
    (Field::from_vec_unchecked(r), Field::from_vec_unchecked(b))
}

/// Box-block feasibility of plain fields, for callers outside the loop.
pub fn in_box(r: &[f64], b: &[f64], delta: f64, tol: f64) -> bool {
    check_simplex(r, b, tol).is_ok()
        && r.iter()
            .zip(b)
            .all(|(x, y)| *x >= delta - tol && *y >= delta - tol && x + y <= 1.0 - delta + tol)
}
