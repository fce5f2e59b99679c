//! Minimal dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Everything is `f64`. Operations are recorded on a [`Tape`] as they run;
//! [`Tape::backward`] sweeps the record once in reverse to produce exact
//! gradients. [`finite_diff_check`] compares those against central
//! differences.

mod error;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_errors, op_gradient_suite};
pub use kernels::{AttentionGroup, AttentionLayout};
pub use params::{decode_checkpoint, encode_checkpoint, payload_checksum, Checkpoint, ParamId, ParamStore};
pub use tape::{attention, embedding_lookup, Gradients, Tape, Var};
pub use tensor::Tensor;
