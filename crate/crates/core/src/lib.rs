//! Risk estimation for penalized M-estimators in high dimensions: exact and
//! approximate leave-one-out, an AMP-calibrated estimate, K-fold CV, and the
//! machinery to compare them on synthetic data.

pub mod amp;
pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod families;
pub mod model;
pub mod risk;
pub mod solver;
pub mod svg;

pub use error::{Error, Result};
pub use families::{FamilyKind, ScalarFamily};
pub use model::{Dataset, FitResult, PenalizedModel};
pub use solver::{fit, fit_loo, SolverConfig};
