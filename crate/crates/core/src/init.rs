//! Deterministic parameter initialization keyed by (seed, parameter name),
//! so a parameter starts identical whichever other parameters exist.

use pigen_numerics::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub(crate) fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

pub(crate) fn uniform(store: &mut ParamStore, seed: u64, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
    let mut rng = rng_for(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(store.add(name, Tensor::new(shape, data)?)?)
}

/// Uniform(±1/√fan_in) for a `rows × cols` weight matrix.
pub(crate) fn matrix(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    uniform(store, seed, name, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

pub(crate) fn constant(store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
    Ok(store.add(name, Tensor::full(shape, value)?)?)
}
