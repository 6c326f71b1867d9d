//! Compressed sparse row storage and the iterative solvers behind every
//! Poisson solve and implicit time step.
//!
//! Symmetric positive definite systems go through preconditioned conjugate
//! gradients, everything else through BiCGSTAB. Both use an ILU(0)
//! preconditioner, which is an exact factorization for the banded 1D systems.

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Square CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from unordered triplets; duplicates are summed in a fixed order
    /// so assembly is bit-reproducible.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, v) in &sorted {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({i}, {j}) outside {n}x{n} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i });
            }
        }
        // stable sort keeps insertion order among duplicates
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Storage slot of entry `(i, j)` if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    /// Raw values in storage order, for refilling a fixed pattern.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out.push((i, j, v));
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Structural and numerical symmetry within `rel_tol` of the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..self.n).all(|i| {
            self.row(i)
                .all(|(j, v)| (v - self.get(j, i)).abs() <= rel_tol * scale.max(f64::MIN_POSITIVE))
        })
    }

    /// Zeroes the rows and columns of `fixed` and puts a unit diagonal there.
    pub fn eliminate_dirichlet(&self, fixed: &[bool]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in out.row_ptr[i]..out.row_ptr[i + 1] {
                let j = out.col_idx[k];
                if fixed[i] || fixed[j] {
                    out.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        out
    }

    fn diag_index(&self, i: usize) -> Option<usize> {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .binary_search(&i)
            .ok()
            .map(|k| range.start + k)
    }
}

/// A square sparse operator plus its symmetry flag.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub symmetric: bool,
    pub matrix: CsrMatrix,
}

impl SparseSystem {
    pub fn new(matrix: CsrMatrix, symmetric: bool) -> Self {
        Self { symmetric, matrix }
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], symmetric: bool) -> Result<Self> {
        Ok(Self::new(CsrMatrix::from_triplets(n, triplets)?, symmetric))
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.matrix.triplets()
    }
}

/// Incomplete LU factorization with zero fill, stored on the matrix pattern.
#[derive(Debug, Clone)]
struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    fn new(a: &CsrMatrix) -> Option<Self> {
        let mut lu = a.clone();
        let n = lu.n;
        let mut diag = Vec::with_capacity(n);
        for i in 0..n {
            diag.push(lu.diag_index(i)?);
        }
        // marker[j] = position of column j in the current row
        let mut marker = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                marker[lu.col_idx[k]] = k;
            }
            for k in start..end {
                let j = lu.col_idx[k];
                if j >= i {
                    break;
                }
                let pivot = lu.values[diag[j]];
                if pivot == 0.0 || !pivot.is_finite() {
                    return None;
                }
                let factor = lu.values[k] / pivot;
                lu.values[k] = factor;
                for kk in diag[j] + 1..lu.row_ptr[j + 1] {
                    let m = marker[lu.col_idx[kk]];
                    if m != usize::MAX {
                        lu.values[m] -= factor * lu.values[kk];
                    }
                }
            }
            for k in start..end {
                marker[lu.col_idx[k]] = usize::MAX;
            }
            let d = lu.values[diag[i]];
            if d == 0.0 || !d.is_finite() {
                return None;
            }
        }
        Some(Self { lu, diag })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.lu.n;
        for i in 0..n {
            let mut acc = r[i];
            for k in self.lu.row_ptr[i]..self.diag[i] {
                acc -= self.lu.values[k] * z[self.lu.col_idx[k]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in self.diag[i] + 1..self.lu.row_ptr[i + 1] {
                acc -= self.lu.values[k] * z[self.lu.col_idx[k]];
            }
            z[i] = acc / self.lu.values[self.diag[i]];
        }
    }
}

#[derive(Debug, Clone)]
enum Preconditioner {
    Ilu(Ilu0),
    Jacobi(Vec<f64>),
}

impl Preconditioner {
    fn new(a: &CsrMatrix) -> Self {
        match Ilu0::new(a) {
            Some(ilu) => Preconditioner::Ilu(ilu),
            None => Preconditioner::Jacobi(
                (0..a.n)
                    .map(|i| {
                        let d = a.get(i, i);
                        if d.abs() > 0.0 {
                            1.0 / d
                        } else {
                            1.0
                        }
                    })
                    .collect(),
            ),
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Ilu(ilu) => ilu.apply(r, z),
            Preconditioner::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a converged solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// A factorized operator that can be solved against repeatedly.
#[derive(Debug, Clone)]
pub struct LinearSolver {
    system: SparseSystem,
    precond: Preconditioner,
    pub max_iter: usize,
}

impl LinearSolver {
    pub fn new(system: SparseSystem) -> Self {
        let precond = Preconditioner::new(&system.matrix);
        let max_iter = 10 * system.dim().max(1);
        Self {
            system,
            precond,
            max_iter,
        }
    }

    pub fn system(&self) -> &SparseSystem {
        &self.system
    }

    pub fn solve(&self, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
        let mut x = vec![0.0; rhs.len()];
        self.solve_into(rhs, &mut x, tol)?;
        Ok(x)
    }

    /// Solves in place, using the incoming contents of `x` as initial guess.
    pub fn solve_into(&self, rhs: &[f64], x: &mut [f64], tol: f64) -> Result<SolveStats> {
        let n = self.system.dim();
        if rhs.len() != n || x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        let bnorm = norm(rhs);
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            });
        }
        if self.system.symmetric {
            self.pcg(rhs, x, tol, bnorm)
        } else {
            self.bicgstab(rhs, x, tol, bnorm)
        }
    }

    fn residual(&self, rhs: &[f64], x: &[f64]) -> Vec<f64> {
        let ax = self.system.matrix.mul_vec(x);
        rhs.iter().zip(&ax).map(|(b, a)| b - a).collect()
    }

    fn pcg(&self, rhs: &[f64], x: &mut [f64], tol: f64, bnorm: f64) -> Result<SolveStats> {
        let n = rhs.len();
        let a = &self.system.matrix;
        let mut r = self.residual(rhs, x);
        let mut rel = norm(&r) / bnorm;
        if rel <= tol {
            return Ok(SolveStats {
                iterations: 0,
                relative_residual: rel,
            });
        }
        let mut z = vec![0.0; n];
        self.precond.apply(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for it in 1..=self.max_iter {
            a.mul_vec_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            rel = norm(&r) / bnorm;
            if rel <= tol {
                // guard against drift of the recursive residual
                let true_rel = norm(&self.residual(rhs, x)) / bnorm;
                if true_rel <= tol {
                    return Ok(SolveStats {
                        iterations: it,
                        relative_residual: true_rel,
                    });
                }
                r = self.residual(rhs, x);
            }
            self.precond.apply(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::NotConverged {
            iterations: self.max_iter,
            residual: norm(&self.residual(rhs, x)) / bnorm,
        })
    }

    fn bicgstab(&self, rhs: &[f64], x: &mut [f64], tol: f64, bnorm: f64) -> Result<SolveStats> {
        let n = rhs.len();
        let a = &self.system.matrix;
        let mut r = self.residual(rhs, x);
        let mut rel = norm(&r) / bnorm;
        let mut iterations = 0;
        // restart loop protects against breakdown of the shadow residual
        'restart: while iterations < self.max_iter {
            if rel <= tol {
                return Ok(SolveStats {
                    iterations,
                    relative_residual: rel,
                });
            }
            let r_hat = r.clone();
            let mut rho = 1.0;
            let mut alpha = 1.0;
            let mut omega = 1.0;
            let mut v = vec![0.0; n];
            let mut p = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut s = vec![0.0; n];
            let mut z = vec![0.0; n];
            let mut t = vec![0.0; n];
            while iterations < self.max_iter {
                iterations += 1;
                let rho_new = dot(&r_hat, &r);
                if rho_new.abs() < 1e-300 {
                    r = self.residual(rhs, x);
                    rel = norm(&r) / bnorm;
                    continue 'restart;
                }
                let beta = (rho_new / rho) * (alpha / omega);
                rho = rho_new;
                for i in 0..n {
                    p[i] = r[i] + beta * (p[i] - omega * v[i]);
                }
                self.precond.apply(&p, &mut y);
                a.mul_vec_into(&y, &mut v);
                let rv = dot(&r_hat, &v);
                if rv.abs() < 1e-300 {
                    r = self.residual(rhs, x);
                    rel = norm(&r) / bnorm;
                    continue 'restart;
                }
                alpha = rho / rv;
                for i in 0..n {
                    s[i] = r[i] - alpha * v[i];
                }
                if norm(&s) / bnorm <= tol {
                    for i in 0..n {
                        x[i] += alpha * y[i];
                    }
                    r = self.residual(rhs, x);
                    rel = norm(&r) / bnorm;
                    if rel <= tol {
                        return Ok(SolveStats {
                            iterations,
                            relative_residual: rel,
                        });
                    }
                    continue 'restart;
                }
                self.precond.apply(&s, &mut z);
                a.mul_vec_into(&z, &mut t);
                let tt = dot(&t, &t);
                omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
                for i in 0..n {
                    x[i] += alpha * y[i] + omega * z[i];
                    r[i] = s[i] - omega * t[i];
                }
                rel = norm(&r) / bnorm;
                if rel <= tol {
                    let true_r = self.residual(rhs, x);
                    let true_rel = norm(&true_r) / bnorm;
                    if true_rel <= tol {
                        return Ok(SolveStats {
                            iterations,
                            relative_residual: true_rel,
                        });
                    }
                    r = true_r;
                    rel = true_rel;
                    continue 'restart;
                }
                if omega == 0.0 {
                    continue 'restart;
                }
            }
        }
        Err(Error::NotConverged {
            iterations,
            residual: norm(&self.residual(rhs, x)) / bnorm,
        })
    }
}

/// One-shot solve of `system · x = rhs` to relative residual `tol`.
pub fn solve_sparse(system: &SparseSystem, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    LinearSolver::new(system.clone()).solve(rhs, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian_1d(n: usize) -> SparseSystem {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        SparseSystem::from_triplets(n, &t, true).unwrap()
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0)]).unwrap();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn identity_returns_rhs() {
        let sys = SparseSystem::new(CsrMatrix::identity(5), true);
        let v = vec![1.0, -2.0, 3.5, 0.0, 7.0];
        assert_eq!(solve_sparse(&sys, &v, DEFAULT_TOL).unwrap(), v);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let sys = laplacian_1d(10);
        assert!(solve_sparse(&sys, &[0.0; 10], DEFAULT_TOL)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = laplacian_1d(4);
        assert!(matches!(
            solve_sparse(&sys, &[1.0; 3], DEFAULT_TOL),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nonsymmetric_bicgstab() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((i, i - 1, -1.5));
            }
            if i + 1 < n {
                t.push((i, i + 1, -0.5));
            }
            if i + 7 < n {
                t.push((i, i + 7, 0.3));
            }
        }
        let sys = SparseSystem::from_triplets(n, &t, false).unwrap();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = solve_sparse(&sys, &rhs, 1e-12).unwrap();
        let ax = sys.matrix.mul_vec(&x);
        let res: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(res / norm(&rhs) <= 1e-12);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let mut solver = LinearSolver::new(laplacian_1d(200));
        // Jacobi-like cap too small to finish a 2D-type problem is hard to build
        // in 1D since ILU is exact there; force it through the iteration cap.
        solver.precond = Preconditioner::Jacobi(vec![0.5; 200]);
        solver.max_iter = 3;
        let rhs = vec![1.0; 200];
        match solver.solve(&rhs, 1e-12) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-12 && residual.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn random_spd_systems_meet_residual_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..=200);
            // B^T B + I with sparse random B
            let mut b = Vec::new();
            for i in 0..n {
                for _ in 0..3 {
                    b.push((i, rng.gen_range(0..n), rng.gen_range(-1.0..1.0)));
                }
            }
            let bm = CsrMatrix::from_triplets(n, &b).unwrap();
            let mut dense = vec![0.0; n * n];
            for (i, k, v) in bm.triplets() {
                for (j, w) in bm.row(i) {
                    dense[k * n + j] += v * w;
                }
            }
            let mut t = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let v = dense[i * n + j] + if i == j { 1.0 } else { 0.0 };
                    if v != 0.0 {
                        t.push((i, j, v));
                    }
                }
            }
            let sys = SparseSystem::from_triplets(n, &t, true).unwrap();
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = solve_sparse(&sys, &rhs, DEFAULT_TOL).unwrap();
            let ax = sys.matrix.mul_vec(&x);
            let res: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(res / norm(&rhs) <= DEFAULT_TOL, "n = {n}");
        }
    }

    #[test]
    fn dirichlet_elimination_keeps_symmetry() {
        let sys = laplacian_1d(6);
        let mut fixed = vec![false; 6];
        fixed[0] = true;
        fixed[5] = true;
        let reduced = sys.matrix.eliminate_dirichlet(&fixed);
        assert!(reduced.is_symmetric(1e-12));
        assert_eq!(reduced.get(0, 0), 1.0);
        assert_eq!(reduced.get(1, 0), 0.0);
    }
}
