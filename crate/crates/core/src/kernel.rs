//! Interaction kernels and the convolution operators built on them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{assemble_fem, Field, Mesh};
use crate::sparse::{LinearSolver, SparseSystem, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Newtonian potential, the fundamental solution of `-Δ`.
    Coulomb { dim: usize },
    /// `exp(-|x|² / 2σ²)`, unnormalized.
    Gaussian { dim: usize, sigma: f64 },
}

impl KernelSpec {
    pub fn coulomb(dim: usize) -> Self {
        KernelSpec::Coulomb { dim }
    }

    pub fn gaussian(dim: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian width {sigma} must be positive"
            )));
        }
        Ok(KernelSpec::Gaussian { dim, sigma })
    }

    pub fn dim(&self) -> usize {
        match *self {
            KernelSpec::Coulomb { dim } | KernelSpec::Gaussian { dim, .. } => dim,
        }
    }

    /// `k = ∫ K dx`, defined only for integrable kernels.
    pub fn total_integral(&self) -> Option<f64> {
        match *self {
            KernelSpec::Coulomb { .. } => None,
            KernelSpec::Gaussian { dim, sigma } => Some((2.0 * PI * sigma * sigma).powf(dim as f64 / 2.0)),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match *self {
            KernelSpec::Coulomb { dim } => coulomb_eval(x, dim),
            KernelSpec::Gaussian { sigma, .. } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                Ok((-r2 / (2.0 * sigma * sigma)).exp())
            }
        }
    }
}

/// Evaluates the Coulomb kernel at point `x ∈ ℝ^N`.
///
/// N = 3 uses the surface measure `4π` of the unit sphere, which makes the
/// kernel the fundamental solution of `-Δ` like the N = 1, 2 branches.
pub fn coulomb_eval(x: &[f64], n: usize) -> Result<f64> {
    if !(1..=3).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "Coulomb kernel dimension {n} not in 1..=3"
        )));
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    match n {
        1 => Ok(-0.5 * r),
        _ if r == 0.0 => Err(Error::Domain(format!(
            "Coulomb kernel is singular at the origin for N = {n}"
        ))),
        2 => Ok(-r.ln() / (2.0 * PI)),
        _ => Ok(1.0 / (4.0 * PI * r)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionMode {
    /// Trapezoid quadrature of the free-space convolution integral; 1D only.
    FreeQuadrature,
    /// P1 solution of `-Δu = f` with `u = 0` on the boundary.
    DirichletPoisson,
}

impl ConvolutionMode {
    pub fn default_for_dim(dim: usize) -> Self {
        if dim == 1 {
            ConvolutionMode::FreeQuadrature
        } else {
            ConvolutionMode::DirichletPoisson
        }
    }
}

#[derive(Debug, Clone)]
enum Backend {
    /// Prefix-sum evaluation of `-½ Σ_j w_j f_j |x_i - x_j|`, O(n).
    CoulombPrefix {
        order: Vec<usize>,
        x: Vec<f64>,
        w: Vec<f64>,
    },
    /// Row-major `q[i*n + j] = K(x_i - x_j) w_j`.
    Dense { q: Vec<f64> },
    Poisson {
        solver: LinearSolver,
        boundary: Vec<bool>,
        weights: Vec<f64>,
        tol: f64,
    },
}

/// Precomputed convolution operator for one `(mesh, kernel, mode)` triple.
///
/// Safe to share between threads; every call is a pure function of its input.
#[derive(Debug, Clone)]
pub struct Convolver {
    spec: KernelSpec,
    mode: ConvolutionMode,
    n: usize,
    backend: Backend,
}

impl Convolver {
    pub fn new(mesh: &Mesh, spec: KernelSpec, mode: ConvolutionMode) -> Result<Self> {
        if spec.dim() != mesh.dim() {
            return Err(Error::Unsupported(format!(
                "kernel dimension {} on a {}D mesh",
                spec.dim(),
                mesh.dim()
            )));
        }
        let n = mesh.n_nodes();
        let backend = match mode {
            ConvolutionMode::FreeQuadrature => {
                if mesh.dim() != 1 {
                    return Err(Error::Unsupported(
                        "free-space quadrature convolution is available in 1D only".into(),
                    ));
                }
                match spec {
                    KernelSpec::Coulomb { .. } => {
                        let mut order: Vec<usize> = (0..n).collect();
                        order.sort_by(|&a, &b| mesh.x(a).total_cmp(&mesh.x(b)));
                        let x = order.iter().map(|&i| mesh.x(i)).collect();
                        let w = order.iter().map(|&i| mesh.weights()[i]).collect();
                        Backend::CoulombPrefix { order, x, w }
                    }
                    KernelSpec::Gaussian { .. } => Backend::Dense {
                        q: dense_quadrature(mesh, &spec)?,
                    },
                }
            }
            ConvolutionMode::DirichletPoisson => {
                if !matches!(spec, KernelSpec::Coulomb { .. }) {
                    return Err(Error::Unsupported(
                        "Dirichlet-Poisson convolution requires the Coulomb kernel".into(),
                    ));
                }
                let (_, stiffness) = assemble_fem(mesh)?;
                let reduced = stiffness.matrix.eliminate_dirichlet(mesh.boundary());
                Backend::Poisson {
                    solver: LinearSolver::new(SparseSystem::new(reduced, true)),
                    boundary: mesh.boundary().to_vec(),
                    weights: mesh.weights().to_vec(),
                    tol: DEFAULT_TOL,
                }
            }
        };
        Ok(Self { spec, mode, n, backend })
    }

    /// Dense trapezoid quadrature for any kernel, used as a brute-force reference.
    pub fn dense(mesh: &Mesh, spec: KernelSpec) -> Result<Self> {
        if mesh.dim() != 1 {
            return Err(Error::Unsupported("dense quadrature in 1D only".into()));
        }
        Ok(Self {
            spec,
            mode: ConvolutionMode::FreeQuadrature,
            n: mesh.n_nodes(),
            backend: Backend::Dense {
                q: dense_quadrature(mesh, &spec)?,
            },
        })
    }

    pub fn with_tolerance(mut self, new_tol: f64) -> Self {
        if let Backend::Poisson { tol, .. } = &mut self.backend {
            *tol = new_tol;
        }
        self
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn mode(&self) -> ConvolutionMode {
        self.mode
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n];
        self.apply_into(f, &mut out)?;
        Ok(out)
    }

    /// Writes `K ∗ f` into `out`. For the Poisson backend the incoming
    /// contents of `out` seed the iterative solver.
    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) -> Result<()> {
        if f.len() != self.n || out.len() != self.n {
            return Err(Error::MeshMismatch {
                expected: self.n,
                got: f.len(),
            });
        }
        match &self.backend {
            Backend::CoulombPrefix { order, x, w } => {
                let n = self.n;
                let mut wf = vec![0.0; n];
                let mut wfx = vec![0.0; n];
                for k in 0..n {
                    wf[k] = w[k] * f[order[k]];
                    wfx[k] = wf[k] * x[k];
                }
                let total0: f64 = wf.iter().sum();
                let total1: f64 = wfx.iter().sum();
                let (mut below0, mut below1) = (0.0, 0.0);
                for k in 0..n {
                    let above0 = total0 - below0 - wf[k];
                    let above1 = total1 - below1 - wfx[k];
                    let s = x[k] * below0 - below1 + above1 - x[k] * above0;
                    out[order[k]] = -0.5 * s;
                    below0 += wf[k];
                    below1 += wfx[k];
                }
            }
            Backend::Dense { q } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = q[i * self.n..(i + 1) * self.n].iter().zip(f).map(|(a, b)| a * b).sum();
                }
            }
            Backend::Poisson {
                solver,
                boundary,
                weights,
                tol,
            } => {
                let rhs: Vec<f64> = (0..self.n)
                    .map(|i| if boundary[i] { 0.0 } else { weights[i] * f[i] })
                    .collect();
                solver.solve_into(&rhs, out, *tol)?;
                for (o, &b) in out.iter_mut().zip(boundary) {
                    if b {
                        *o = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

fn dense_quadrature(mesh: &Mesh, spec: &KernelSpec) -> Result<Vec<f64>> {
    let n = mesh.n_nodes();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d: Vec<f64> = mesh.point(i).iter().zip(mesh.point(j)).map(|(a, b)| a - b).collect();
            q[i * n + j] = spec.eval(&d)? * mesh.weights()[j];
        }
    }
    Ok(q)
}

/// `K ∗ f` at every node.
pub fn convolve(mesh: &Mesh, f: &[f64], spec: KernelSpec, mode: ConvolutionMode) -> Result<Field> {
    mesh.check(f)?;
    if let Some(node) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node });
    }
    Field::new(Convolver::new(mesh, spec, mode)?.apply(f)?)
}

/// Cell-wise gradients of a nodal field averaged back to the nodes with
/// cell-measure weights. Returns one field per space dimension.
pub fn nodal_gradient(mesh: &Mesh, u: &[f64]) -> Result<Vec<Field>> {
    mesh.check(u)?;
    let dim = mesh.dim();
    let n = mesh.n_nodes();
    let mut acc = vec![vec![0.0; n]; dim];
    let mut wsum = vec![0.0; n];
    for c in 0..mesh.n_cells() {
        let v = mesh.cell(c);
        let g = mesh.cell_gradients(c);
        let m = mesh.cell_measure(c);
        let mut grad = [0.0; 2];
        for (a, &i) in v.iter().enumerate() {
            grad[0] += u[i] * g[a][0];
            grad[1] += u[i] * g[a][1];
        }
        for &i in v {
            for d in 0..dim {
                acc[d][i] += m * grad[d];
            }
            wsum[i] += m;
        }
    }
    Ok(acc
        .into_iter()
        .map(|comp| Field::from_vec_unchecked(comp.iter().zip(&wsum).map(|(a, w)| a / w).collect()))
        .collect())
}

/// `∇(K ∗ f)` recovered at the nodes.
pub fn grad_convolve(mesh: &Mesh, f: &[f64], spec: KernelSpec, mode: ConvolutionMode) -> Result<Vec<Field>> {
    let u = convolve(mesh, f, spec, mode)?;
    nodal_gradient(mesh, &u)
}

/// `Δ_K u = (1/k) K ∗ u - u` for an integrable kernel, via 1D quadrature.
pub fn nonlocal_laplacian(mesh: &Mesh, u: &[f64], spec: KernelSpec) -> Result<Field> {
    let k = match spec.total_integral() {
        Some(k) if k > 0.0 => k,
        _ => {
            return Err(Error::Unsupported(
                "nonlocal Laplacian needs a nonnegative integrable kernel".into(),
            ))
        }
    };
    let ku = convolve(mesh, u, spec, ConvolutionMode::FreeQuadrature)?;
    Ok(ku.zip_map(&Field::from_vec_unchecked(u.to_vec()), |a, b| a / k - b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disc_mesh, build_interval_mesh, inner, l2_distance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coulomb_values() {
        assert_eq!(coulomb_eval(&[2.0], 1).unwrap(), -1.0);
        assert_eq!(coulomb_eval(&[0.0], 1).unwrap(), 0.0);
        assert!(coulomb_eval(&[1.0, 0.0], 2).unwrap().abs() < 1e-16);
        assert!(coulomb_eval(&[0.6, 0.8], 2).unwrap().abs() < 1e-15);
        assert!(matches!(coulomb_eval(&[0.0, 0.0], 2), Err(Error::Domain(_))));
        assert!(matches!(coulomb_eval(&[0.0; 3], 3), Err(Error::Domain(_))));
        assert!((coulomb_eval(&[1.0, 0.0, 0.0], 3).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-16);
        assert!(coulomb_eval(&[1.0], 4).is_err());
    }

    #[test]
    fn coulomb_is_radially_nonincreasing() {
        let radii: Vec<f64> = (1..200).map(|k| k as f64 * 0.05).collect();
        for n in 1..=3 {
            let vals: Vec<f64> = radii
                .iter()
                .map(|&r| {
                    let mut x = vec![0.0; n];
                    x[0] = r;
                    coulomb_eval(&x, n).unwrap()
                })
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]), "N = {n}");
        }
    }

    #[test]
    fn gaussian_integral_closed_form() {
        let g = KernelSpec::gaussian(1, 0.1).unwrap();
        let k = g.total_integral().unwrap();
        assert!((k - (2.0 * PI * 0.01f64).sqrt()).abs() < 1e-15);
        assert!(KernelSpec::gaussian(1, 0.0).is_err());
        assert!(KernelSpec::coulomb(1).total_integral().is_none());
    }

    #[test]
    fn free_quadrature_of_one() {
        let m = build_interval_mesh(-1.0, 1.0, 401).unwrap();
        let u = convolve(
            &m,
            &vec![1.0; 401],
            KernelSpec::coulomb(1),
            ConvolutionMode::FreeQuadrature,
        )
        .unwrap();
        // trapezoid error for the kinked integrand is O(h²)
        for i in 0..401 {
            let x = m.x(i);
            assert!((u[i] + 0.5 * (1.0 + x * x)).abs() < 1e-4, "x = {x}");
        }
        assert!((u[200] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn prefix_sum_matches_dense_reference() {
        let m = build_interval_mesh(-1.0, 1.0, 57).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..57).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = Convolver::new(&m, KernelSpec::coulomb(1), ConvolutionMode::FreeQuadrature)
            .unwrap()
            .apply(&f)
            .unwrap();
        let slow = Convolver::dense(&m, KernelSpec::coulomb(1)).unwrap().apply(&f).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn dirichlet_poisson_of_one_1d() {
        let m = build_interval_mesh(-1.0, 1.0, 201).unwrap();
        let u = convolve(
            &m,
            &vec![1.0; 201],
            KernelSpec::coulomb(1),
            ConvolutionMode::DirichletPoisson,
        )
        .unwrap();
        assert!((u[100] - 0.5).abs() < 1e-9);
        assert_eq!(u[0], 0.0);
        assert_eq!(u[200], 0.0);
    }

    #[test]
    fn dirichlet_poisson_of_one_disc() {
        let m = build_disc_mesh(2.0, 0.1).unwrap();
        let u = convolve(
            &m,
            &vec![1.0; m.n_nodes()],
            KernelSpec::coulomb(2),
            ConvolutionMode::DirichletPoisson,
        )
        .unwrap();
        assert!((u[0] - 1.0).abs() < 0.01, "u(0) = {}", u[0]);
        assert!((0..m.n_nodes()).filter(|&i| m.is_boundary(i)).all(|i| u[i] == 0.0));
    }

    #[test]
    fn mode_mismatches_are_rejected() {
        let d = build_disc_mesh(1.0, 0.5).unwrap();
        let f = vec![1.0; d.n_nodes()];
        assert!(convolve(&d, &f, KernelSpec::coulomb(2), ConvolutionMode::FreeQuadrature).is_err());
        let m = build_interval_mesh(-1.0, 1.0, 11).unwrap();
        let g = KernelSpec::gaussian(1, 0.1).unwrap();
        assert!(convolve(&m, &[1.0; 11], g, ConvolutionMode::DirichletPoisson).is_err());
        assert!(convolve(
            &m,
            &[1.0; 11],
            KernelSpec::coulomb(2),
            ConvolutionMode::DirichletPoisson
        )
        .is_err());
    }

    #[test]
    fn gradient_of_convolution() {
        let m = build_interval_mesh(-1.0, 1.0, 401).unwrap();
        let ones = vec![1.0; 401];
        let gq = grad_convolve(&m, &ones, KernelSpec::coulomb(1), ConvolutionMode::FreeQuadrature).unwrap();
        let gp = grad_convolve(&m, &ones, KernelSpec::coulomb(1), ConvolutionMode::DirichletPoisson).unwrap();
        let h = m.h();
        // x = 0.5 is node 300
        assert!((gq[0][300] + 0.5).abs() < h);
        assert!(gq[0][200].abs() < h);
        for i in 0..401 {
            assert!((gq[0][i] - gp[0][i]).abs() < 2.0 * h);
        }
    }

    #[test]
    fn even_input_gives_even_output() {
        let m = build_interval_mesh(-1.0, 1.0, 101).unwrap();
        let f = m.field_from_fn(|p| (3.0 * p[0]).cos() + p[0] * p[0]);
        for mode in [ConvolutionMode::FreeQuadrature, ConvolutionMode::DirichletPoisson] {
            let u = convolve(&m, &f, KernelSpec::coulomb(1), mode).unwrap();
            for i in 0..101 {
                assert!((u[i] - u[100 - i]).abs() < 1e-10);
            }
            let g = nodal_gradient(&m, &u).unwrap();
            assert!(g[0][50].abs() < 1e-10);
        }
    }

    #[test]
    fn convolution_is_linear() {
        let m = build_disc_mesh(1.0, 0.2).unwrap();
        let n = m.n_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c = Convolver::new(&m, KernelSpec::coulomb(2), ConvolutionMode::DirichletPoisson).unwrap();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let lhs = c.apply(&combo).unwrap();
        let (cf, cg) = (c.apply(&f).unwrap(), c.apply(&g).unwrap());
        let scale = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            assert!((lhs[i] - (2.0 * cf[i] - 0.5 * cg[i])).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn nonlocal_laplacian_properties() {
        let m = build_interval_mesh(-3.0, 3.0, 601).unwrap();
        let g = KernelSpec::gaussian(1, 0.1).unwrap();
        let zero = nonlocal_laplacian(&m, &vec![0.0; 601], g).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let one = nonlocal_laplacian(&m, &vec![1.0; 601], g).unwrap();
        // interior nodes far from the boundary relative to σ
        for i in 200..=400 {
            assert!(one[i].abs() < 1e-9, "node {i}: {}", one[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u: Vec<f64> = (0..601).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lu = nonlocal_laplacian(&m, &u, g).unwrap();
            assert!(inner(&m, &u, &lu) <= 1e-10);
        }
        assert!(nonlocal_laplacian(&m, &vec![1.0; 601], KernelSpec::coulomb(1)).is_err());
        let _ = l2_distance(&m, &zero, &one);
    }
}
