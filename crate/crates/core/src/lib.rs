//! Desk-scale laboratory for diffusion-based adversarial purification.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`] / [`graph`]: dense tensors with reverse-mode automatic
//!   differentiation and checkpointed (recomputed) segments;
//! - [`rngtape`]: counter-based deterministic Gaussian draws, noise tapes,
//!   and attacker-knowledge views;
//! - [`diffusion`]: schedules, the forward process, DDPM/DDIM reverse steps,
//!   the noise-prediction loss, and step-skipping;
//! - [`nets`] / [`optim`]: tiny time-conditioned denoiser, classifier, Adam;
//! - [`purify`]: the diffuse-denoise-classify pipeline and worst-of-k
//!   evaluation;
//! - [`attacks`]: PGD/FGSM-style attacks with EoT, deterministic white-box
//!   settings, DW_semi-k, gradient similarity, loss landscapes;
//! - [`addt`]: rank-based Gaussian mapping and adversarial denoising
//!   diffusion training;
//! - [`lab`]: configs, synthetic data, and experiment runners.

pub mod addt;
pub mod attacks;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod io;
pub mod lab;
pub mod nets;
pub mod optim;
pub mod purify;
pub mod rngtape;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
