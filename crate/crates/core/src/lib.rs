//! Linear-Gaussian model of inputs, neural recordings and task labels, with
//! closed-form scaling laws for a brain-regularised estimator, Monte Carlo
//! checks of those laws, and budget allocation between the two data sources.

pub mod budget;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod linmodel;
pub mod montecarlo;
pub mod rng;
pub mod textfmt;
pub mod theory;
pub mod valuation;

pub use budget::{BudgetReport, BudgetSpec, Favorability};
pub use error::{Error, Result};
pub use estimators::{EncodingModel, Penalty, TaskPredictor};
pub use linmodel::{FmriPreset, LatentNoise, ModelParams, ModelSpec, SmallPreset, TestSpec};
pub use montecarlo::{LambdaPolicy, McConfig, RiskEstimate};
pub use theory::{derive_quantities, TheoryQuantities};
pub use valuation::{ValueReport, ValueSource};
