//! Jointly row-sparse nonconvex regression across treatment cohorts.
//!
//! The coefficient matrix `θ ∈ ℝ^{p×q}` holds one column per treatment level;
//! penalizing row 2-norms with MCP or SCAD selects covariates shared across
//! cohorts. The selected set feeds plug-in and doubly robust effect estimates.
//!
//! Numerical modules are generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root pin `f64`, which the experiment harness and CLI use.

pub mod effects;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod logistic;
pub mod model;
pub mod prox;
pub mod regularizers;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod synthgen;

pub use error::{Error, Result};
pub use model::{
    compute_moments, grad_loss, grad_shifted_loss, loss, partition_by_treatment, Cohort,
    CoefficientMatrix, CohortDataset, MomentCache, PooledDataset, SupportSet,
};
pub use prox::{fit, fit_restricted, objective, prox_l12, FitResult, ProxScaling, SolverConfig};
pub use regularizers::{amenability_report, Penalty, PenaltyKind, RegularizerSpec};
pub use scalar::Scalar;
pub use selection::{select, select_pooled, CvPolicy, CvRule, LambdaGrid, SelectionConfig, SelectionMode, SelectionResult};

pub type Coefficients = CoefficientMatrix<f64>;
pub type Cohorts = CohortDataset<f64>;
pub type Pooled = PooledDataset<f64>;
pub type Moments = MomentCache<f64>;
pub type Regularizer = RegularizerSpec<f64>;
pub type Solver = SolverConfig<f64>;
pub type Fit = FitResult<f64>;
pub type Selection = SelectionConfig<f64>;
pub type Selected = SelectionResult<f64>;
pub type Effects = effects::EffectEstimate<f64>;
pub type Propensity = effects::PropensityModel<f64>;

/// Single-precision counterparts.
pub mod f32 {
    pub type Coefficients = super::CoefficientMatrix<f32>;
    pub type Cohorts = super::CohortDataset<f32>;
    pub type Pooled = super::PooledDataset<f32>;
    pub type Moments = super::MomentCache<f32>;
    pub type Regularizer = super::RegularizerSpec<f32>;
    pub type Solver = super::SolverConfig<f32>;
}
