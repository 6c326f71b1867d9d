//! Energies of the two-species model and the pointwise algebra around them.
//!
//! All nonlinear integrands (entropy, products of fields) use nodal
//! quadrature with the lumped weights. Linear integrals agree with the
//! consistent mass matrix exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ConvolutionMode, Convolver, KernelSpec};
use crate::mesh::{inner, integrate, Field, Mesh};

/// Slack allowed on `0 ≤ r, b` and `r + b ≤ 1` before an entropy evaluation fails.
pub const SIMPLEX_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    Off,
    /// Flat on `|x| ≤ ½`, quadratic outside.
    DoubleWell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub eps: f64,
    #[serde(default = "one")]
    pub d: f64,
    pub c11: f64,
    pub c22: f64,
    pub m_r: f64,
    pub m_b: f64,
    /// `None` switches the nonlocal interaction off entirely.
    pub kernel: Option<KernelSpec>,
    pub conv_mode: ConvolutionMode,
    pub potential: Potential,
}

fn one() -> f64 {
    1.0
}

impl ModelParams {
    /// Coulomb interaction with the default convolution mode for `dim`.
    pub fn coulomb(dim: usize, eps: f64, c11: f64, c22: f64, m_r: f64, m_b: f64) -> Self {
        Self {
            eps,
            d: 1.0,
            c11,
            c22,
            m_r,
            m_b,
            kernel: Some(KernelSpec::coulomb(dim)),
            conv_mode: ConvolutionMode::default_for_dim(dim),
            potential: if dim == 1 {
                Potential::DoubleWell
            } else {
                Potential::Off
            },
        }
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return bad(format!("eps = {} must be finite and nonnegative", self.eps));
        }
        if !(self.d > 0.0) || !self.d.is_finite() {
            return bad(format!("d = {} must be positive", self.d));
        }
        if !(self.c11 <= 0.0) || !(self.c22 <= 0.0) {
            return bad(format!(
                "self-interaction strengths must be nonpositive (c11 = {}, c22 = {})",
                self.c11, self.c22
            ));
        }
        if !(self.m_r > 0.0) || !(self.m_b > 0.0) {
            return bad(format!(
                "masses must be positive (m_r = {}, m_b = {})",
                self.m_r, self.m_b
            ));
        }
        if self.m_r + self.m_b > mesh.volume() {
            return bad(format!(
                "m_r + m_b = {} exceeds |Ω| = {}: admissible set is empty",
                self.m_r + self.m_b,
                mesh.volume()
            ));
        }
        if let Some(k) = self.kernel {
            if k.dim() != mesh.dim() {
                return bad(format!("kernel dimension {} on a {}D mesh", k.dim(), mesh.dim()));
            }
        }
        Ok(())
    }

    /// The same model with species roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            c11: self.c22,
            c22: self.c11,
            m_r: self.m_b,
            m_b: self.m_r,
            ..self.clone()
        }
    }
}

/// Separately tallied energy parts; `total = ε·F^E + F^0 + F^C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub eps: f64,
    pub entropic: f64,
    pub interaction: f64,
    pub confinement: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(eps: f64, entropic: f64, interaction: f64, confinement: f64) -> Self {
        Self {
            eps,
            entropic,
            interaction,
            confinement,
            total: eps * entropic + interaction + confinement,
        }
    }

    /// `ε·F^E + w·F^0 + F^C`.
    pub fn weighted(&self, interaction_weight: f64) -> f64 {
        self.eps * self.entropic + interaction_weight * self.interaction + self.confinement
    }

    /// The functional dissipated by the cross-diffusion flow: the interaction
    /// enters with weight ½ because the flux carries `c11 K∗r − K∗b`.
    pub fn flow_energy(&self) -> f64 {
        self.weighted(0.5)
    }
}

/// The 1D confining double well.
pub fn potential_v(x: f64) -> f64 {
    if x > 0.5 {
        (x - 0.5).powi(2)
    } else if x < -0.5 {
        (x + 0.5).powi(2)
    } else {
        0.0
    }
}

/// Nodal values of the configured potential; 2D uses the radial profile.
pub fn potential_field(mesh: &Mesh, potential: Potential) -> Field {
    match potential {
        Potential::Off => Field::zeros(mesh.n_nodes()),
        Potential::DoubleWell => mesh.field_from_fn(|p| {
            if p.len() == 1 {
                potential_v(p[0])
            } else {
                potential_v(p.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
        }),
    }
}

fn xlogx(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        s * s.ln()
    }
}

/// Checks `0 ≤ r, b` and `r + b ≤ 1` within `slack`.
pub fn check_simplex(r: &[f64], b: &[f64], slack: f64) -> Result<()> {
    for (i, (&ri, &bi)) in r.iter().zip(b).enumerate() {
        if ri < -slack {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "r < 0",
                magnitude: -ri,
            });
        }
        if bi < -slack {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "b < 0",
                magnitude: -bi,
            });
        }
        if ri + bi > 1.0 + slack {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "r + b > 1",
                magnitude: ri + bi - 1.0,
            });
        }
    }
    Ok(())
}

/// Model bound to a mesh: owns the convolution operator and the nodal potential.
#[derive(Debug, Clone)]
pub struct Model<'m> {
    mesh: &'m Mesh,
    params: ModelParams,
    conv: Option<Convolver>,
    v: Field,
}

impl<'m> Model<'m> {
    pub fn new(mesh: &'m Mesh, params: ModelParams) -> Result<Self> {
        params.validate(mesh)?;
        Self::new_unchecked(mesh, params)
    }

    /// Skips the parameter validation (used for diagnostics on arbitrary fields).
    pub fn new_unchecked(mesh: &'m Mesh, params: ModelParams) -> Result<Self> {
        let conv = match params.kernel {
            Some(k) => Some(Convolver::new(mesh, k, params.conv_mode)?),
            None => None,
        };
        let v = potential_field(mesh, params.potential);
        Ok(Self { mesh, params, conv, v })
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn potential(&self) -> &Field {
        &self.v
    }

    pub fn convolver(&self) -> Option<&Convolver> {
        self.conv.as_ref()
    }

    /// `K ∗ f`, identically zero when the interaction is off.
    pub fn convolve(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.mesh.n_nodes()];
        self.convolve_into(f, &mut out)?;
        Ok(out)
    }

    pub fn convolve_into(&self, f: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.conv {
            Some(c) => c.apply_into(f, out),
            None => {
                self.mesh.check(f)?;
                out.iter_mut().for_each(|v| *v = 0.0);
                Ok(())
            }
        }
    }

    pub fn entropy(&self, r: &[f64], b: &[f64], slack: f64) -> Result<f64> {
        self.mesh.check(r)?;
        self.mesh.check(b)?;
        check_simplex(r, b, slack)?;
        Ok(self
            .mesh
            .weights()
            .iter()
            .zip(r.iter().zip(b))
            .map(|(w, (&ri, &bi))| w * (xlogx(ri) + xlogx(bi) + xlogx(1.0 - ri - bi)))
            .sum())
    }

    /// F^0 from precomputed convolutions `ur = K∗r`, `ub = K∗b`.
    pub fn interaction_from(&self, r: &[f64], b: &[f64], ur: &[f64], ub: &[f64]) -> f64 {
        let p = &self.params;
        p.c11 * inner(self.mesh, r, ur) - inner(self.mesh, r, ub) - inner(self.mesh, b, ur)
            + p.c22 * inner(self.mesh, b, ub)
    }

    pub fn interaction(&self, r: &[f64], b: &[f64]) -> Result<f64> {
        let ur = self.convolve(r)?;
        let ub = self.convolve(b)?;
        Ok(self.interaction_from(r, b, &ur, &ub))
    }

    pub fn confinement(&self, r: &[f64], b: &[f64]) -> Result<f64> {
        self.mesh.check(r)?;
        self.mesh.check(b)?;
        let rho: Vec<f64> = r.iter().zip(b).map(|(a, c)| a + c).collect();
        Ok(inner(self.mesh, &rho, &self.v))
    }

    pub fn energy(&self, r: &[f64], b: &[f64]) -> Result<EnergyBreakdown> {
        self.energy_with_slack(r, b, SIMPLEX_SLACK)
    }

    pub fn energy_with_slack(&self, r: &[f64], b: &[f64], slack: f64) -> Result<EnergyBreakdown> {
        let fe = self.entropy(r, b, slack)?;
        let f0 = self.interaction(r, b)?;
        let fc = self.confinement(r, b)?;
        Ok(EnergyBreakdown::new(self.params.eps, fe, f0, fc))
    }

    /// First-variation residual of `εF^E + w·F^0 + F^C`; the interaction part
    /// is `2w(c11 K∗r − K∗b)`.
    pub fn first_variation_residual(&self, r: &[f64], b: &[f64], interaction_weight: f64) -> Result<FirstVariation> {
        let p = &self.params;
        let (u, v) = entropy_vars(r, b, p.eps, &self.v)?;
        let ur = self.convolve(r)?;
        let ub = self.convolve(b)?;
        let s = 2.0 * interaction_weight;
        let inter_r: Vec<f64> = ur.iter().zip(&ub).map(|(a, c)| s * (p.c11 * a - c)).collect();
        let inter_b: Vec<f64> = ur.iter().zip(&ub).map(|(a, c)| s * (p.c22 * c - a)).collect();
        let res_r: Vec<f64> = u.iter().zip(&inter_r).map(|(a, c)| a + c).collect();
        let res_b: Vec<f64> = v.iter().zip(&inter_b).map(|(a, c)| a + c).collect();
        let range = |f: &[f64]| {
            f.iter().copied().fold(f64::NEG_INFINITY, f64::max) - f.iter().copied().fold(f64::INFINITY, f64::min)
        };
        Ok(FirstVariation {
            dev_r: mass_weighted_std(self.mesh, &res_r, r),
            dev_b: mass_weighted_std(self.mesh, &res_b, b),
            scale_r: range(&inter_r),
            scale_b: range(&inter_b),
            res_r: Field::from_vec_unchecked(res_r),
            res_b: Field::from_vec_unchecked(res_b),
        })
    }
}

/// Residual of the stationarity condition and its deviation from a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariation {
    pub res_r: Field,
    pub res_b: Field,
    /// Standard deviations weighted by the species' own density.
    pub dev_r: f64,
    pub dev_b: f64,
    /// Ranges of the interaction parts that the entropy term must balance.
    pub scale_r: f64,
    pub scale_b: f64,
}

/// Standard deviation of `f` under the measure `density dx`. Nodes where a
/// species is absent (and its box bound active) carry no weight.
pub fn mass_weighted_std(mesh: &Mesh, f: &[f64], density: &[f64]) -> f64 {
    let w: Vec<f64> = mesh
        .weights()
        .iter()
        .zip(density)
        .map(|(a, d)| a * d.max(0.0))
        .collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mean = w.iter().zip(f).map(|(a, v)| a * v).sum::<f64>() / total;
    (w.iter().zip(f).map(|(a, v)| a * (v - mean).powi(2)).sum::<f64>() / total).sqrt()
}

/// `sqrt(∫(f − f̄)² / |Ω|)` with `f̄` the mean.
pub fn weighted_std(mesh: &Mesh, f: &[f64]) -> f64 {
    let vol = mesh.volume();
    let mean = integrate(mesh, f).unwrap_or(0.0) / vol;
    let var: f64 = mesh
        .weights()
        .iter()
        .zip(f)
        .map(|(w, v)| w * (v - mean).powi(2))
        .sum::<f64>()
        / vol;
    var.sqrt()
}

pub fn entropy_energy(mesh: &Mesh, r: &[f64], b: &[f64]) -> Result<f64> {
    mesh.check(r)?;
    mesh.check(b)?;
    check_simplex(r, b, SIMPLEX_SLACK)?;
    Ok(mesh
        .weights()
        .iter()
        .zip(r.iter().zip(b))
        .map(|(w, (&ri, &bi))| w * (xlogx(ri) + xlogx(bi) + xlogx(1.0 - ri - bi)))
        .sum())
}

pub fn interaction_energy(mesh: &Mesh, r: &[f64], b: &[f64], params: &ModelParams) -> Result<f64> {
    Model::new_unchecked(mesh, params.clone())?.interaction(r, b)
}

pub fn confinement_energy(mesh: &Mesh, r: &[f64], b: &[f64], potential: Potential) -> Result<f64> {
    mesh.check(r)?;
    mesh.check(b)?;
    let v = potential_field(mesh, potential);
    let rho: Vec<f64> = r.iter().zip(b).map(|(a, c)| a + c).collect();
    Ok(inner(mesh, &rho, &v))
}

pub fn total_energy(mesh: &Mesh, r: &[f64], b: &[f64], params: &ModelParams) -> Result<EnergyBreakdown> {
    Model::new_unchecked(mesh, params.clone())?.energy(r, b)
}

pub fn first_variation_residual(mesh: &Mesh, r: &[f64], b: &[f64], params: &ModelParams) -> Result<FirstVariation> {
    Model::new_unchecked(mesh, params.clone())?.first_variation_residual(r, b, 1.0)
}

/// Pointwise multi-well potential of the nonlocal Cahn-Hilliard form.
pub fn multiwell_w(r: f64, b: f64, params: &ModelParams) -> Result<f64> {
    let slack = SIMPLEX_SLACK;
    if r < -slack || b < -slack || r + b > 1.0 + slack {
        return Err(Error::Domain(format!("({r}, {b}) outside the unit triangle")));
    }
    let (c11, c22) = (params.c11, params.c22);
    Ok(
        params.eps * (xlogx(r) + xlogx(b) + xlogx(1.0 - r - b)) + 0.5 * c11 * r * r - r * b + 0.5 * c22 * b * b
            - 0.5 * c11 * r
            - 0.5 * c22 * b,
    )
}

/// Entropy variables `u = ε(log r − log(1−ρ)) + V`, `v = ε(log b − log(1−ρ)) + V`.
pub fn entropy_vars(r: &[f64], b: &[f64], eps: f64, v: &[f64]) -> Result<(Field, Field)> {
    if r.len() != b.len() || r.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: r.len(),
            got: b.len().min(v.len()),
        });
    }
    let mut uu = Vec::with_capacity(r.len());
    let mut vv = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let (ri, bi) = (r[i], b[i]);
        let void = 1.0 - ri - bi;
        if !(ri > 0.0) || !(bi > 0.0) || !(void > 0.0) {
            return Err(Error::ConstraintViolation {
                node: i,
                what: "entropy variables need 0 < r, b and r + b < 1",
                magnitude: ri.min(bi).min(void),
            });
        }
        let lv = void.ln();
        uu.push(eps * (ri.ln() - lv) + v[i]);
        vv.push(eps * (bi.ln() - lv) + v[i]);
    }
    Ok((Field::from_vec_unchecked(uu), Field::from_vec_unchecked(vv)))
}

/// Inverse of [`entropy_vars`], evaluated with a max-shift so large
/// exponents cannot overflow.
pub fn invert_entropy_vars(u: &[f64], v: &[f64], eps: f64, pot: &[f64]) -> Result<(Field, Field)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(
            "inverting entropy variables needs eps > 0".into(),
        ));
    }
    if u.len() != v.len() || u.len() != pot.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len().min(pot.len()),
        });
    }
    let mut r = Vec::with_capacity(u.len());
    let mut b = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        if !u[i].is_finite() || !v[i].is_finite() {
            return Err(Error::NonFinite { node: i });
        }
        let a = (u[i] - pot[i]) / eps;
        let c = (v[i] - pot[i]) / eps;
        let shift = a.max(c).max(0.0);
        let (ea, ec, e0) = ((a - shift).exp(), (c - shift).exp(), (-shift).exp());
        let denom = e0 + ea + ec;
        r.push(ea / denom);
        b.push(ec / denom);
    }
    Ok((Field::from_vec_unchecked(r), Field::from_vec_unchecked(b)))
}
