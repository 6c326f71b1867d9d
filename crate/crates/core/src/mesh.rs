//! Meshes of the interval and the disc, nodal fields, and P1 assembly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseSystem};

/// Simplicial mesh in one or two space dimensions.
///
/// Cells are stored flat with `dim + 1` vertex indices each. Per-cell measures
/// and basis-function gradients are computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<[f64; 2]>,
    cells: Vec<usize>,
    boundary: Vec<bool>,
    h: f64,
    measures: Vec<f64>,
    grads: Vec<[[f64; 2]; 3]>,
    weights: Vec<f64>,
}

impl Mesh {
    /// Validates connectivity and geometry; boundary flags are derived from
    /// the topology (nodes of facets owned by exactly one cell).
    pub fn new(dim: usize, coords: Vec<[f64; 2]>, cells: Vec<usize>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("mesh dimension {dim} not in {{1, 2}}")));
        }
        let nv = dim + 1;
        if cells.len() % nv != 0 || cells.is_empty() {
            return Err(Error::InvalidArgument("cell connectivity length".into()));
        }
        let n = coords.len();
        if let Some(&bad) = cells.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "cell references node {bad} but mesh has {n} nodes"
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::NonFinite { node: i });
            }
        }
        let n_cells = cells.len() / nv;
        let mut measures = Vec::with_capacity(n_cells);
        let mut grads = Vec::with_capacity(n_cells);
        let mut h: f64 = 0.0;
        for c in 0..n_cells {
            let v = &cells[c * nv..(c + 1) * nv];
            let (measure, g, diam) = cell_geometry(dim, &coords, v);
            if !(measure > 0.0) {
                return Err(Error::DegenerateElement { element: c, measure });
            }
            measures.push(measure);
            grads.push(g);
            h = h.max(diam);
        }
        let mut weights = vec![0.0; n];
        for c in 0..n_cells {
            for &i in &cells[c * nv..(c + 1) * nv] {
                weights[i] += measures[c] / nv as f64;
            }
        }
        if let Some(i) = weights.iter().position(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(format!("node {i} belongs to no cell")));
        }
        let boundary = topological_boundary(dim, n, &cells);
        Ok(Self {
            dim,
            coords,
            cells,
            boundary,
            h,
            measures,
            grads,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_cells(&self) -> usize {
        self.measures.len()
    }

    /// Maximum cell diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i][..self.dim]
    }

    pub fn x(&self, i: usize) -> f64 {
        self.coords[i][0]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.cells[c * nv..(c + 1) * nv]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks(self.dim + 1)
    }

    pub fn cell_measure(&self, c: usize) -> f64 {
        self.measures[c]
    }

    /// Gradients of the P1 basis functions on cell `c`, in vertex order.
    pub fn cell_gradients(&self, c: usize) -> &[[f64; 2]] {
        &self.grads[c][..self.dim + 1]
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    /// Lumped-mass (nodal quadrature) weights: row sums of the consistent mass matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// |Ω_h|
    pub fn volume(&self) -> f64 {
        self.measures.iter().sum()
    }

    /// Unique undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for cell in self.cells() {
            for a in 0..cell.len() {
                for b in a + 1..cell.len() {
                    let (i, j) = (cell[a].min(cell[b]), cell[a].max(cell[b]));
                    edges.push((i, j));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn field_from_fn(&self, f: impl Fn(&[f64]) -> f64) -> Field {
        Field((0..self.n_nodes()).map(|i| f(self.point(i))).collect())
    }

    pub fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n_nodes() {
            return Err(Error::MeshMismatch {
                expected: self.n_nodes(),
                got: f.len(),
            });
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {} {}", self.dim, self.n_nodes(), self.n_cells())?;
        for (i, c) in self.coords.iter().enumerate() {
            let flag = u8::from(self.boundary[i]);
            if self.dim == 1 {
                writeln!(out, "{} {}", c[0], flag)?;
            } else {
                writeln!(out, "{} {} {}", c[0], c[1], flag)?;
            }
        }
        for cell in self.cells() {
            let line: Vec<String> = cell.iter().map(|i| i.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Reads the plain-text format written by [`Mesh::write_text`]. Stored
    /// boundary flags must agree with the topological boundary.
    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l))
            .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let parse_err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let mut next_line = |what: &str| -> Result<(usize, Vec<String>)> {
            match lines.next() {
                Some((k, Ok(l))) => Ok((k, l.split_whitespace().map(str::to_string).collect())),
                Some((k, Err(e))) => Err(parse_err(k, &e.to_string())),
                None => Err(parse_err(0, &format!("unexpected end of input, expected {what}"))),
            }
        };
        let (k, header) = next_line("header")?;
        if header.len() != 3 {
            return Err(parse_err(k, "header must be `dim n_nodes n_elems`"));
        }
        let num =
            |k: usize, s: &str| -> Result<usize> { s.parse().map_err(|_| parse_err(k, &format!("bad integer `{s}`"))) };
        let dim = num(k, &header[0])?;
        let n_nodes = num(k, &header[1])?;
        let n_elems = num(k, &header[2])?;
        if dim != 1 && dim != 2 {
            return Err(parse_err(k, "dim must be 1 or 2"));
        }
        let mut coords = Vec::with_capacity(n_nodes);
        let mut flags = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (k, tok) = next_line("node line")?;
            if tok.len() != dim + 1 {
                return Err(parse_err(k, "node line must be `x [y] boundary_flag`"));
            }
            let mut c = [0.0; 2];
            for d in 0..dim {
                c[d] = tok[d]
                    .parse()
                    .map_err(|_| parse_err(k, &format!("bad coordinate `{}`", tok[d])))?;
            }
            coords.push(c);
            flags.push(match tok[dim].as_str() {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(k, &format!("bad boundary flag `{other}`"))),
            });
        }
        let mut cells = Vec::with_capacity(n_elems * (dim + 1));
        for _ in 0..n_elems {
            let (k, tok) = next_line("element line")?;
            if tok.len() != dim + 1 {
                return Err(parse_err(k, "element line has wrong vertex count"));
            }
            for t in &tok {
                cells.push(num(k, t)?);
            }
        }
        let mesh = Mesh::new(dim, coords, cells)?;
        if let Some(i) = (0..n_nodes).find(|&i| flags[i] != mesh.boundary[i]) {
            return Err(Error::InvalidArgument(format!(
                "boundary flag of node {i} disagrees with mesh topology"
            )));
        }
        Ok(mesh)
    }
}

fn cell_geometry(dim: usize, coords: &[[f64; 2]], v: &[usize]) -> (f64, [[f64; 2]; 3], f64) {
    let mut g = [[0.0; 2]; 3];
    if dim == 1 {
        let (a, b) = (coords[v[0]][0], coords[v[1]][0]);
        let len = b - a;
        g[0] = [-1.0 / len, 0.0];
        g[1] = [1.0 / len, 0.0];
        (len, g, len.abs())
    } else {
        let p: Vec<[f64; 2]> = v.iter().map(|&i| coords[i]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det;
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            // rotate the opposite edge by 90 degrees
            g[a] = [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det];
        }
        let d = |i: usize, j: usize| ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
        let diam = d(0, 1).max(d(1, 2)).max(d(0, 2));
        (area, g, diam)
    }
}

fn topological_boundary(dim: usize, n: usize, cells: &[usize]) -> Vec<bool> {
    let mut boundary = vec![false; n];
    let nv = dim + 1;
    let mut facet_count: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for cell in cells.chunks(nv) {
        for skip in 0..nv {
            let mut facet: Vec<usize> = (0..nv).filter(|&a| a != skip).map(|a| cell[a]).collect();
            facet.sort_unstable();
            *facet_count.entry(facet).or_insert(0) += 1;
        }
    }
    for (facet, count) in facet_count {
        if count == 1 {
            for i in facet {
                boundary[i] = true;
            }
        }
    }
    boundary
}

/// Nodal values of a P1 function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field(Vec<f64>);

impl Field {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        Ok(Self(values))
    }

    /// Wraps values without the finiteness check.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Field> for Vec<f64> {
    fn from(f: Field) -> Self {
        f.0
    }
}

/// Uniform mesh of `[a, b]` with `n_nodes` nodes.
pub fn build_interval_mesh(a: f64, b: f64, n_nodes: usize) -> Result<Mesh> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("interval [{a}, {b}] is empty")));
    }
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 nodes, got {n_nodes}")));
    }
    let step = (b - a) / (n_nodes - 1) as f64;
    let coords = (0..n_nodes)
        .map(|i| {
            let x = if i + 1 == n_nodes { b } else { a + i as f64 * step };
            [x, 0.0]
        })
        .collect();
    let cells = (0..n_nodes - 1).flat_map(|i| [i, i + 1]).collect();
    Mesh::new(1, coords, cells)
}

/// Concentric-ring triangulation of the polygon inscribed in the disc of
/// radius `radius` centred at the origin. Ring `k` carries `6k` nodes.
pub fn build_disc_mesh(radius: f64, h_target: f64) -> Result<Mesh> {
    if !(radius > 0.0) || !(h_target > 0.0) || !(h_target < radius) {
        return Err(Error::InvalidArgument(format!(
            "disc mesh needs radius > 0 and 0 < h < radius (radius {radius}, h {h_target})"
        )));
    }
    let n_rings = (radius / h_target).ceil() as usize;
    let mut coords = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    let mut ring_len = vec![1usize];
    for k in 1..=n_rings {
        let rk = radius * k as f64 / n_rings as f64;
        let nk = 6 * k;
        ring_start.push(coords.len());
        ring_len.push(nk);
        for j in 0..nk {
            let theta = 2.0 * PI * j as f64 / nk as f64;
            coords.push([rk * theta.cos(), rk * theta.sin()]);
        }
    }
    let mut cells = Vec::new();
    let mut push_ccw = |a: usize, b: usize, c: usize, coords: &[[f64; 2]]| {
        let (p, q, r) = (coords[a], coords[b], coords[c]);
        let det = (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]);
        if det > 0.0 {
            cells.extend_from_slice(&[a, b, c]);
        } else {
            cells.extend_from_slice(&[a, c, b]);
        }
    };
    for k in 1..=n_rings {
        let (os, on) = (ring_start[k], ring_len[k]);
        if k == 1 {
            for j in 0..on {
                push_ccw(0, os + j, os + (j + 1) % on, &coords);
            }
            continue;
        }
        let (is, inn) = (ring_start[k - 1], ring_len[k - 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < inn || j < on {
            let next_in = (i + 1) as f64 / inn as f64;
            let next_out = (j + 1) as f64 / on as f64;
            if j < on && (i == inn || next_out <= next_in) {
                push_ccw(is + i % inn, os + j, os + (j + 1) % on, &coords);
                j += 1;
            } else {
                push_ccw(is + i % inn, os + j % on, is + (i + 1) % inn, &coords);
                i += 1;
            }
        }
    }
    Mesh::new(2, coords, cells)
}

/// Consistent P1 mass and stiffness matrices.
pub fn assemble_fem(mesh: &Mesh) -> Result<(SparseSystem, SparseSystem)> {
    let mut mass = Vec::new();
    let mut stiff = Vec::new();
    for c in 0..mesh.n_cells() {
        let v = mesh.cell(c);
        let m = mesh.cell_measure(c);
        let g = mesh.cell_gradients(c);
        let nv = v.len();
        for a in 0..nv {
            for b in 0..nv {
                let local_mass = match (mesh.dim(), a == b) {
                    (1, true) => m / 3.0,
                    (1, false) => m / 6.0,
                    (_, true) => m / 6.0,
                    (_, false) => m / 12.0,
                };
                mass.push((v[a], v[b], local_mass));
                stiff.push((v[a], v[b], m * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
            }
        }
    }
    let n = mesh.n_nodes();
    Ok((
        SparseSystem::from_triplets(n, &mass, true)?,
        SparseSystem::from_triplets(n, &stiff, true)?,
    ))
}

/// Stiffness matrix with a piecewise-constant coefficient `coeff[c]` per cell:
/// the one-point quadrature of `∫ coeff ∇φ_j·∇φ_i`.
pub fn assemble_weighted_stiffness(mesh: &Mesh, coeff: &[f64]) -> Result<CsrMatrix> {
    if coeff.len() != mesh.n_cells() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_cells(),
            got: coeff.len(),
        });
    }
    let mut t = Vec::with_capacity(mesh.n_cells() * (mesh.dim() + 1).pow(2));
    for c in 0..mesh.n_cells() {
        let v = mesh.cell(c);
        let g = mesh.cell_gradients(c);
        let w = mesh.cell_measure(c) * coeff[c];
        for a in 0..v.len() {
            for b in 0..v.len() {
                t.push((v[a], v[b], w * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.n_nodes(), &t)
}

/// `∫_Ω f dx = 1ᵀ M f`.
pub fn integrate(mesh: &Mesh, f: &[f64]) -> Result<f64> {
    mesh.check(f)?;
    Ok(mesh.weights().iter().zip(f).map(|(w, v)| w * v).sum())
}

/// Lumped-mass L² inner product.
pub fn inner(mesh: &Mesh, f: &[f64], g: &[f64]) -> f64 {
    mesh.weights()
        .iter()
        .zip(f.iter().zip(g))
        .map(|(w, (a, b))| w * a * b)
        .sum()
}

pub fn l2_norm(mesh: &Mesh, f: &[f64]) -> f64 {
    inner(mesh, f, f).sqrt()
}

pub fn l2_distance(mesh: &Mesh, f: &[f64], g: &[f64]) -> f64 {
    mesh.weights()
        .iter()
        .zip(f.iter().zip(g))
        .map(|(w, (a, b))| w * (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}
