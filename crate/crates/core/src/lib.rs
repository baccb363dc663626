//! Evidential multi-view classification robust to per-view adversarial
//! perturbations.
//!
//! The library combines Dirichlet-evidence opinions with Dempster-rule
//! fusion, and hardens the fusion against attacked views through four
//! mechanisms: perturbation-insensitive pretraining of the evidence
//! extractor, evidence-guided disentanglement of each view into clean and
//! adversarial parts, recalibration of weak adversarial features, and
//! view-level evidential attention. Everything trains on a small
//! reverse-mode autodiff tape in 64-bit floats, fully seeded.
//!
//! The numeric core is generic over the scalar type; the experiment pipeline
//! uses the `f64` aliases exported below.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod losses;
pub mod networks;
pub mod opinion;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` tensor used by the experiment pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
/// `f64` tape used by the experiment pipeline.
pub type Tape64 = tape::Tape<f64>;
/// `f64` opinion used by the experiment pipeline.
pub type Opinion64 = opinion::DirichletOpinion<f64>;
/// `f64` network set used by the experiment pipeline.
pub type Networks64 = networks::ViewNetworkSet<f64>;
