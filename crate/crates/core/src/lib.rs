//! Transformer text classifier trained under a joint latent-variable objective,
//! with post-hoc out-of-distribution scoring and ranking metrics.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors, a reverse-mode tape and AdamW.
//! - [`encoder`]: whitespace vocabulary and a small pre-LN transformer that
//!   exposes the `[CLS]` state of every layer.
//! - [`vi_head`]: the variational head (posterior, decoder, classifier and the
//!   learnable layer-combination vector) and its training losses.
//! - [`scoring`]: MSP, energy, Mahalanobis and cosine confidence scores.
//! - [`metrics`]: AUROC, FAR@95, AUPR and accuracy.
//! - [`harness`]: data ingestion, training, checkpoints and reports.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod scoring;
pub mod vi_head;

pub use error::{Error, Result};
