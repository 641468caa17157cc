//! Multiply robust estimation of principal survival causal effects.

pub mod cox_survival;
pub mod dataset;
pub mod error;
pub mod glm_logistic;
mod optim;
pub mod principal_strata;
pub mod psce_estimators;
pub mod resampling_inference;
pub mod sensitivity;
pub mod simulation_lab;

pub use dataset::{Cell, ColumnSchema, Dataset, Design, SubjectRecord};
pub use error::{PsceError, Result};
pub use principal_strata::{PrincipalScores, Stratum};
pub use psce_estimators::{Method, ModelSpec, NuisanceBundle, PsceEstimate};
