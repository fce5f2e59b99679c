//! Named parameter storage and the checkpoint container format.
//!
//! Layout: `PIGCKPT1\n`, a little-endian `u64` header length, a JSON header
//! (user config block, parameter manifest of name/shape/offset, payload
//! length, SHA-256 of the payload), then the row-major f64 payload.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PIGCKPT1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::InvalidArgument {
                op: "ParamStore::add",
                reason: format!("duplicate parameter name {name}"),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "ParamStore::set",
                left: self.tensors[id.0].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `tape` as a tracked variable, in id order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.variable(t.clone())).collect()
    }

    /// Like [`ParamStore::bind`] but as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
    payload_len: usize,
    checksum: String,
}

/// A decoded checkpoint: its config block plus tensors by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copy tensors into `store` by name. Extra checkpoint entries are
    /// ignored; a store parameter missing from the checkpoint is an error.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<(ParamId, String)> = store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

pub fn payload_checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(store: &ParamStore, config: serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(store.element_count() * 8);
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config,
        params,
        payload_len: payload.len(),
        checksum: payload_checksum(&payload),
    };
    let header = serde_json::to_vec(&header).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let payload = &rest[hlen..];
    if payload.len() != header.payload_len {
        return Err(bad("payload length mismatch"));
    }
    if payload_checksum(payload) != header.checksum {
        return Err(bad("checksum mismatch"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = BTreeMap::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("parameter {} out of range", e.name)))?;
        params.insert(e.name, Tensor::new(&e.shape, slice.to_vec())?);
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap()).unwrap();
        s.add("b", Tensor::new(&[3], vec![0.1, 0.2, f64::MIN_POSITIVE]).unwrap()).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = store();
        let bytes = encode_checkpoint(&s, serde_json::json!({"d": 2})).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.config["d"], 2);
        let mut fresh = ParamStore::new();
        fresh.add("b", Tensor::zeros(&[3]).unwrap()).unwrap();
        fresh.add("w", Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        ck.apply_to(&mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.id("w").unwrap()), s.get(s.id("w").unwrap()));
        assert_eq!(fresh.get(fresh.id("b").unwrap()), s.get(s.id("b").unwrap()));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut bytes = encode_checkpoint(&store(), serde_json::Value::Null).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bytes), Err(NumericsError::Checkpoint(m)) if m.contains("checksum")));
    }

    #[test]
    fn missing_parameter_fails_loudly() {
        let bytes = encode_checkpoint(&store(), serde_json::Value::Null).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        let mut other = ParamStore::new();
        other.add("gamma", Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(ck.apply_to(&mut other).is_err());
    }

    #[test]
    fn shape_mismatch_on_apply() {
        let bytes = encode_checkpoint(&store(), serde_json::Value::Null).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[4]).unwrap()).unwrap();
        assert!(ck.apply_to(&mut other).is_err());
    }
}
