//! Retrieval-augmented patient-instruction generation: corpus handling,
//! patient retrieval, code co-occurrence graph reasoning, the gated
//! encoder–decoder model, training, decoding and evaluation.

pub mod corpus;
pub mod decoding;
mod error;
mod init;
pub mod io;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
