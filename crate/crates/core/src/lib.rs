//! Regression with matrix-valued responses through Kronecker product
//! factorization.
//!
//! The model is `Y_i = Σ_k beta1_k X_i beta2_k^T + E_i`, equivalently
//! `vec(Y_i) = ν vec(X_i) + vec(E_i)` with `ν = Σ_k beta2_k ⊗ beta1_k`.
//! The estimator computes the OLS coefficient `ν̃`, rearranges it so that
//! Kronecker structure becomes low rank, and truncates its SVD.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod mle;
pub mod simgen;
pub mod tensor;

pub use analysis::{by_adjust, two_group_analysis, ChannelTestResult, GroupData, TwoGroupOptions};
pub use error::{Error, Result};
pub use estimator::{
    fit_ols_nu, kro_pro_fac, predict, select_rank, FitOptions, FitReport, KroneckerCoefficients,
    KroneckerTerm, SvdEngine,
};
pub use experiment::{run_simulation, ExperimentConfig, Method, RunReport};
pub use linalg::SvdFactors;
pub use mle::{mle_fit, MleOptions, MleState};
pub use simgen::{Dataset, DatasetSeeds, NoiseKind, NoiseModelSpec};
pub use tensor::{Dims, Mat};
