//! Finite-element toolkit for a two-species cross-diffusion model with
//! nonlocal interaction: mesh and kernels, energies, a projected ADMM
//! minimizer, an IMEX time stepper and diagnostics on the results.

pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod evolve;
pub mod kernel;
pub mod mesh;
pub mod minimize;
pub mod sparse;
pub mod table;

pub use diagnostics::{overlap, EntropyReport, StationarityOptions, StationarityReport};
pub use energy::{EnergyBreakdown, Model, ModelParams, Potential};
pub use error::{Error, Result};
pub use evolve::{EvolveConfig, EvolveResult, MassMatrix, State, StepReport, Transport};
pub use kernel::{ConvolutionMode, Convolver, KernelSpec};
pub use mesh::{build_disc_mesh, build_interval_mesh, Field, Mesh};
pub use minimize::{
    random_init, random_init_tilted, AdmmConfig, AdmmResult, AdmmState, BoxSolver, BoxVariant, GradientForm, Species,
    Tilt,
};
pub use sparse::{CsrMatrix, LinearSolver, SparseSystem};
pub use table::Table;
