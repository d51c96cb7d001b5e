//! Natural-gradient hybrid variational inference.
//!
//! The variational approximation is `q(θ, z) = p(z | θ, y) q⁰(θ)`: latent
//! variables are drawn from their exact (or short-run MCMC) conditional
//! posterior, and the global parameters get a Gaussian `q⁰ = N(μ, BBᵀ + D²)`
//! with a factor covariance. `q⁰` is fitted by stochastic natural-gradient
//! ascent using the exact, damped Fisher information of the factor family.
//!
//! Every numerical type is generic over [`Real`] (`f32` or `f64`); the
//! `*64` and `*32` aliases below fix the scalar.

pub mod dmm;
pub mod error;
pub mod evaluate;
pub mod factor_gaussian;
pub mod io;
pub mod linalg;
pub mod model;
pub mod models;
pub mod natgrad;
pub mod optimizer;
pub mod reparam;
pub mod scalar;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
pub use factor_gaussian::{ParamsRecord, ReparamNoise, VariationalParams, Woodbury};
pub use linalg::{Cholesky, Matrix};
pub use model::{GroupedDataset, LatentModel, LoglikTerms};
pub use natgrad::{DampingSpec, FimContext};
pub use optimizer::{fit, ElboTrace, FitResult, Mode, TrainConfig};
pub use reparam::{estimate_gradient, noisy_elbo, GradientEstimate};
pub use scalar::Real;

pub type VariationalParams64 = VariationalParams<f64>;
pub type VariationalParams32 = VariationalParams<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type GroupedDataset64 = GroupedDataset<f64>;
pub type GroupedDataset32 = GroupedDataset<f32>;
pub type FimContext64 = FimContext<f64>;
pub type FimContext32 = FimContext<f32>;
pub type LinearReModel64 = models::LinearReModel<f64>;
pub type ProbitReModel64 = models::ProbitReModel<f64>;
pub type GaussianDmm64 = dmm::GaussianDmm<f64>;
pub type GaussianDmm32 = dmm::GaussianDmm<f32>;
pub type BernoulliDmm64 = dmm::BernoulliDmm<f64>;
pub type BernoulliDmm32 = dmm::BernoulliDmm<f32>;
