//! Minimal dense-tensor engine: tensors, a parameter store, a reverse-mode
//! tape and the AdamW optimizer.
//!
//! Every network in this crate is expressed as a sequence of tape calls.
//! Tensors are row-major; the last axis is the "column" axis for all
//! row-wise operations (softmax, layer norm, log-sum-exp).

pub mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use optim::AdamW;
pub use real::{DType, Real};
pub use tape::{log_sum_exp, softmax_in_place, AttentionGeometry, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
