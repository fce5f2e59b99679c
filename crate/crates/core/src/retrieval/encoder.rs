use std::ops::Range;

use pigen_numerics::{embedding_lookup, ParamId, ParamStore, Var};

use crate::error::{Error, Result};
use crate::init;

/// Embedding → position-wise max-pool → affine projection to the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionEncoder {
    pub embed: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl InstructionEncoder {
    pub fn register(store: &mut ParamStore, seed: u64, vocab_size: usize, embed_dim: usize, d: usize) -> Result<Self> {
        Ok(Self {
            embed: init::uniform(store, seed, "exp.embed", &[vocab_size, embed_dim], 3f64.sqrt())?,
            proj_w: init::matrix(store, seed, "exp.proj.w", embed_dim, d)?,
            proj_b: init::constant(store, "exp.proj.b", &[d], 0.0)?,
        })
    }
}

/// One output row per instruction. `params` is the store bound to a tape.
pub fn encode_instructions<'t>(
    params: &[Var<'t>],
    encoder: &InstructionEncoder,
    instructions: &[&[usize]],
) -> Result<Var<'t>> {
    if instructions.is_empty() {
        return Err(Error::InvalidData("no instructions to encode".into()));
    }
    let mut ids = Vec::new();
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(instructions.len());
    for seq in instructions {
        if seq.is_empty() {
            return Err(Error::InvalidData("cannot encode an empty instruction".into()));
        }
        segments.push(ids.len()..ids.len() + seq.len());
        ids.extend_from_slice(seq);
    }
    let embedded = embedding_lookup(params[encoder.embed.0], &ids)?;
    let pooled = embedded.segment_max(&segments)?;
    Ok(pooled.matmul(params[encoder.proj_w.0])?.add(params[encoder.proj_b.0])?)
}
