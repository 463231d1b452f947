//! Integrating secondary outcomes into a primary regression analysis.
//!
//! The crate fits penalized empirical-likelihood working models to secondary
//! outcomes, turns them into observation weights for the primary estimating
//! equation, and provides plug-in variance estimates and a simulation
//! harness.

pub mod cli;
pub mod el;
pub mod error;
pub mod integrators;
pub mod linalg;
pub mod model_spec;
pub mod pel;
pub mod simlab;
pub mod variance;

pub use el::{solve_dual, ElDualSolution, ElOptions};
pub use error::{PepsiError, Result};
pub use integrators::{
    averaging_fit, naive_fit, pepsi_fit, pepsi_weights, pool_secondary, psi_fit, solve_weighted_ee,
    vis_fit, Integration, Method, PooledComponents, PrimaryFit, WeightVector,
};
pub use model_spec::{
    apply_zero_constraints, eval_jacobian, eval_score, Family, ModelSpec, PrimaryDataset,
    SecondaryDataset,
};
pub use pel::{bic_select, pel_fit, scad, PenaltyConfig, SecondaryFit};
pub use variance::{
    covariance_of, estimate_components, sample_size_check, wald_inference, InferenceTable,
    VarianceComponents,
};
