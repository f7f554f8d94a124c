//! Multimodal deep-kernel sparse variational Gaussian-process classifier.
//!
//! The crate trains a disease-risk model over three patient modalities —
//! medical-code sequences, demographics and location statistics — by fusing
//! learned embeddings into a latent space, warping it with an ARD-RBF kernel
//! and performing sparse variational GP classification with inducing points.
//! Every prediction carries an epistemic uncertainty score.
//!
//! All numerical code is generic over [`scalar::Scalar`]; the aliases below
//! pin the default pipeline to `f64`, which the Cholesky-path gradient
//! tolerances assume.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod rng;
pub mod scalar;
pub mod svgp;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Default-precision computation graph.
pub type Graph64 = autodiff::Graph<f64>;
/// Default-precision cohort.
pub type Cohort64 = data::Cohort<f64>;
/// Default-precision model.
pub type RiskModel64 = model::RiskModel<f64>;
/// Default-precision variational state.
pub type VariationalState64 = svgp::VariationalState<f64>;
