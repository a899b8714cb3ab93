//! Least-squares solvers for linear systems whose rows lose contiguous
//! blocks ("tuples") of entries at random.
//!
//! The centrepiece is ℓ-tuple mSGD ([`solvers::tuple_msgd_step`]), whose
//! update direction is an unbiased estimate of the least-squares gradient
//! under ℓ-tuple missingness. Around it sit plain SGD and entrywise mSGD for
//! comparison, the theory constants and exact/Monte-Carlo expectation
//! oracles ([`analysis`]), imputation baselines ([`baselines`]), seeded
//! experiment presets ([`experiments`]) and a sensor-data pipeline that
//! builds tuple-structured systems from time series ([`cgm`]).

pub mod analysis;
pub mod baselines;
pub mod cgm;
pub mod error;
pub mod experiments;
pub mod matrix;
pub mod missingness;
mod par;
pub mod rng;
pub mod solvers;
pub mod system;
pub mod textio;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use missingness::{build_l, CorrectionStructure, MaskMatrix, MaskRow, ObservedRow, TupleMissingModel};
pub use solvers::{run_solver, ErrorTrace, Method, Projection, SolverConfig, StepSchedule};
pub use system::{error_sq, full_gradient, generate_gaussian_system, objective, LinearSystem};
