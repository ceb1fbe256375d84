//! Domain-generalization training and benchmarking toolkit.
//!
//! The library trains an image classifier on several source domains and
//! evaluates it on an unseen target domain (leave-one-domain-out). Two
//! objectives are provided: plain pooled cross-entropy (ERM) and a
//! mutual-information-regularized objective that keeps the trainable
//! feature extractor close to a frozen pretrained "oracle" encoder via a
//! Gaussian variational bound. A simplified dense stochastic weight
//! averaging mode (SWAD-simplified) can replace validation-checkpoint
//! selection.
//!
//! Module map:
//! - [`data`]: domains, manifests, label handling, deterministic splits
//! - [`augment`]: image loading, the augmentation pipeline, and a
//!   synthetic multi-domain generator for desk-scale experiments
//! - [`encoder`]: feature extractors, the frozen oracle / trainable target
//!   pair, the linear classifier, and checkpoint files
//! - [`mi_reg`]: the variational head and the mutual-information penalty
//! - [`swad`]: snapshot recording, window selection, weight averaging
//! - [`trainer`]: Adam, minibatch composition, the optimization loop
//! - [`harness`]: leave-one-domain-out orchestration and report emission
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! training pipeline uses [`Real`] while verification code can instantiate
//! the same kernels at `f64`.

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod mi_reg;
pub mod rng;
pub mod scalar;
pub mod swad;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{fl, Scalar};

/// Scalar type used by the training pipeline.
pub type Real = f32;
