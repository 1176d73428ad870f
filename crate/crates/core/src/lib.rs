//! Small-noise laboratory for stochastic reaction-diffusion systems on an
//! interval with Dirichlet boundary conditions.
//!
//! The pieces, bottom up:
//!
//! - [`domain`]: grid, sine basis, semigroup and path fields.
//! - [`coefficients`]: drift/diffusion/noise specifications and their sampled validators.
//! - [`fixed_point`]: the deterministic solution map `M(z) = v + z` and its shifted form `M_x`.
//! - [`dynamics`]: the controlled SPDE, skeletons and stochastic convolutions.
//! - [`rate`]: rate-function evaluation by control recovery and instanton optimization.
//! - [`lab`]: Monte Carlo and importance-sampled probabilities, curves, sweeps, exit times.
//! - [`scenario`], [`runner`], [`report`]: JSON scenarios in, CSV/JSON artifacts out.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`). Scenario files
//! always run in `f64`.

pub mod coefficients;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod fixed_point;
pub mod lab;
pub mod rate;
pub mod report;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod scenario;
pub mod stats;
pub mod stepper;

pub use coefficients::{DiffusionSpec, DriftSpec, NoiseSpec, ValidationReport};
pub use domain::{build_basis, Basis, DomainSpec, Field, OperatorSpec, PathField, Spectral};
pub use dynamics::{skeleton, simulate, ControlPath, Model, SimParams};
pub use error::{Error, Result};
pub use rate::{instanton_minimize, rate_evaluate, InstantonProblem, RateResult};
pub use scalar::Real;
pub use scenario::{load_scenario, ScenarioConfig};
pub use stats::Estimate;

pub type Field64 = Field<f64>;
pub type Field32 = Field<f32>;
pub type Path64 = PathField<f64>;
pub type Path32 = PathField<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Basis64 = Basis<f64>;
pub type Basis32 = Basis<f32>;
