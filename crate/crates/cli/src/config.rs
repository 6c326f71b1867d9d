//! Run specification: the JSON document accepted by `crossdiff run`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crossdiff_core::{
    build_disc_mesh, build_interval_mesh, AdmmConfig, ConvolutionMode, EvolveConfig, KernelSpec, Mesh, ModelParams,
    Potential, Tilt,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Minimize,
    Evolve,
    /// One minimize or evolve run per ε value.
    Sweep,
    /// Evolve to stationarity, minimize, and compare the two states.
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Interval {
        a: f64,
        b: f64,
        nodes: usize,
    },
    Disc {
        radius: f64,
        h: f64,
    },
    /// Mesh in the text format, relative paths resolved against the config.
    File {
        path: PathBuf,
    },
}

/// Interaction selector; `none` switches the nonlocal term off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelChoice {
    #[default]
    Coulomb,
    Gaussian {
        sigma: f64,
    },
    None,
}

/// Model parameters with dimension-dependent defaults; masses may be left
/// out when the initial data fixes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub eps: f64,
    #[serde(default = "one")]
    pub d: f64,
    pub c11: f64,
    pub c22: f64,
    #[serde(default)]
    pub m_r: Option<f64>,
    #[serde(default)]
    pub m_b: Option<f64>,
    #[serde(default)]
    pub kernel: KernelChoice,
    #[serde(default)]
    pub conv_mode: Option<ConvolutionMode>,
    #[serde(default)]
    pub potential: Option<Potential>,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    /// Resolves defaults for a mesh of dimension `dim`; `masses` overrides
    /// the configured ones.
    pub fn resolve(&self, dim: usize, masses: Option<(f64, f64)>) -> Result<ModelParams> {
        let (m_r, m_b) = match (masses, self.m_r, self.m_b) {
            (Some(m), _, _) => m,
            (None, Some(r), Some(b)) => (r, b),
            (None, None, _) => bail!("model.m_r: required unless the initial data fixes the masses"),
            (None, _, None) => bail!("model.m_b: required unless the initial data fixes the masses"),
        };
        let kernel = match self.kernel {
            KernelChoice::Coulomb => Some(KernelSpec::coulomb(dim)),
            KernelChoice::Gaussian { sigma } => Some(KernelSpec::gaussian(dim, sigma).context("model.kernel.sigma")?),
            KernelChoice::None => None,
        };
        let mut p = ModelParams::coulomb(dim, self.eps, self.c11, self.c22, m_r, m_b);
        p.d = self.d;
        p.kernel = kernel;
        if let Some(c) = self.conv_mode {
            p.conv_mode = c;
        }
        if let Some(v) = self.potential {
            p.potential = v;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    /// Nodewise uniform values in [0, 0.49], optionally tilted, then projected
    /// onto the masses.
    Random {
        seed: u64,
        #[serde(default)]
        tilt: Option<Tilt>,
    },
    /// `amplitude · H_γ(halfwidth − |x|)` for both species.
    Heaviside {
        amplitude: f64,
        #[serde(default)]
        amplitude_b: Option<f64>,
        halfwidth: f64,
        gamma: f64,
    },
    /// `amplitude · H_γ(halfwidth − |x − c|)` summed over the centers, for
    /// both species (`amplitude_b` overrides the b amplitude).
    Bumps {
        amplitude: f64,
        #[serde(default)]
        amplitude_b: Option<f64>,
        #[serde(default = "origin")]
        centers: Vec<[f64; 2]>,
        halfwidth: f64,
        gamma: f64,
    },
    /// A fields CSV (columns node, x, [y], r, b).
    File { path: PathBuf },
}

fn origin() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepBase {
    #[default]
    Minimize,
    Evolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub eps: Vec<f64>,
    #[serde(default)]
    pub base: SweepBase,
    /// ε of the entry the others are measured against; defaults to the smallest.
    #[serde(default)]
    pub reference_eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub threshold: f64,
    /// Slope tolerance of the interface sign test; mesh size if absent.
    pub sign_tol: Option<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            sign_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub mode: Mode,
    pub domain: Domain,
    pub model: ModelConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    #[serde(default)]
    pub evolve: EvolveConfig,
    pub init: Init,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Output directory; `out/<name>` when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Directory that relative input paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: RunSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
        })?;
        Ok(spec)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        let mesh = match &self.domain {
            Domain::Interval { a, b, nodes } => build_interval_mesh(*a, *b, *nodes)?,
            Domain::Disc { radius, h } => build_disc_mesh(*radius, *h)?,
            Domain::File { path } => {
                let p = self.resolve_path(path);
                let f = std::fs::File::open(&p).with_context(|| format!("domain.path: cannot open {}", p.display()))?;
                Mesh::read_text(std::io::BufReader::new(f)).with_context(|| format!("domain.path: {}", p.display()))?
            }
        };
        Ok(mesh)
    }

    /// Checks everything that can be checked without running a solver.
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("name: must be a non-empty plain file name");
        }
        match (self.mode, &self.sweep) {
            (Mode::Sweep, None) => bail!("sweep: required for mode `sweep`"),
            (Mode::Sweep, Some(s)) if s.eps.is_empty() => bail!("sweep.eps: must not be empty"),
            (Mode::Sweep, Some(s)) if s.eps.iter().any(|e| !(*e >= 0.0)) => {
                bail!("sweep.eps: values must be nonnegative")
            }
            (Mode::Sweep, Some(s)) => {
                if let Some(r) = s.reference_eps {
                    if !s.eps.contains(&r) {
                        bail!("sweep.reference_eps: {r} is not in sweep.eps");
                    }
                }
            }
            (_, Some(_)) => bail!("sweep: only allowed for mode `sweep`"),
            _ => {}
        }
        let needs_masses = matches!(self.init, Init::Random { .. });
        if needs_masses {
            let p = self.model.resolve(mesh.dim(), None)?;
            p.validate(mesh).context("model")?;
        } else if let (Some(r), Some(b)) = (self.model.m_r, self.model.m_b) {
            if r + b > mesh.volume() {
                bail!("model: m_r + m_b = {} exceeds |Ω| = {}", r + b, mesh.volume());
            }
        }
        let probe = self.model.resolve(mesh.dim(), Some((1e-3, 1e-3)))?;
        if self.mode != Mode::Evolve {
            self.admm.validate(&probe).context("admm")?;
        }
        if matches!(self.mode, Mode::Evolve | Mode::Compare)
            || matches!(&self.sweep, Some(s) if s.base == SweepBase::Evolve)
        {
            self.evolve.validate().context("evolve")?;
        }
        if let Init::Bumps { gamma, .. } | Init::Heaviside { gamma, .. } = self.init {
            if !(gamma > 0.0) {
                bail!("init.gamma: must be positive");
            }
        }
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut spec = RunSpec::from_json(&text)?;
    spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mesh = spec.build_mesh()?;
    spec.validate(&mesh)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "mode": "minimize",
        "domain": {"kind": "interval", "a": -1, "b": 1, "nodes": 51},
        "model": {"eps": 0, "c11": -1, "c22": -0.5, "m_r": 0.3, "m_b": 0.3},
        "init": {"kind": "random", "seed": 3}
    }"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let s = RunSpec::from_json(MINIMAL).unwrap();
        let m = s.build_mesh().unwrap();
        s.validate(&m).unwrap();
        let p = s.model.resolve(1, None).unwrap();
        assert_eq!(p.potential, Potential::DoubleWell);
        assert_eq!(p.conv_mode, ConvolutionMode::FreeQuadrature);
        assert_eq!(s.admm, AdmmConfig::default());
        assert_eq!(s.output_dir(), PathBuf::from("out/t"));
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""c11": -1, "#, "");
        let err = RunSpec::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("model") && err.contains("c11"), "{err}");
    }

    #[test]
    fn unknown_field_is_named() {
        let text = MINIMAL.replace(r#""seed": 3"#, r#""seed": 3, "sed": 4"#);
        let err = RunSpec::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("init") && err.contains("sed"), "{err}");
    }

    #[test]
    fn infeasible_masses_rejected() {
        let text = MINIMAL.replace(r#""m_r": 0.3"#, r#""m_r": 1.9"#);
        let s = RunSpec::from_json(&text).unwrap();
        let m = s.build_mesh().unwrap();
        let err = format!("{:#}", s.validate(&m).unwrap_err());
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn sweep_needs_sweep_section() {
        let text = MINIMAL.replace(r#""minimize""#, r#""sweep""#);
        let s = RunSpec::from_json(&text).unwrap();
        let m = s.build_mesh().unwrap();
        assert!(s.validate(&m).unwrap_err().to_string().starts_with("sweep"));
    }

    #[test]
    fn masses_required_for_random_init() {
        let text = MINIMAL.replace(r#", "m_b": 0.3"#, "");
        let s = RunSpec::from_json(&text).unwrap();
        let m = s.build_mesh().unwrap();
        assert!(format!("{:#}", s.validate(&m).unwrap_err()).contains("m_b"));
    }
}
