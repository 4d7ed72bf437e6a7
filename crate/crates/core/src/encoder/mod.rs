//! Whitespace vocabulary and a small pre-LN transformer encoder that exposes
//! the `[CLS]` hidden state of every layer.

mod transformer;
mod vocab;

pub(crate) use transformer::stacks_from;
pub use transformer::{Encoder, EncoderConfig, EncoderOutput, HiddenStack, PositionalKind, TokenBatch};
pub use vocab::{tokenize, Vocabulary, CLS_ID, PAD_ID, UNK_ID};
