use pigen_numerics::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::init;
use crate::knowledge::MedicalKnowledgeGraph;

/// Node embeddings plus per-layer weights of the graph convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gcn {
    pub h0: ParamId,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Gcn {
    pub fn register(store: &mut ParamStore, seed: u64, nodes: usize, d: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("GCN needs at least one layer".into()));
        }
        if nodes == 0 {
            return Err(Error::InsufficientCorpus("knowledge graph has no nodes".into()));
        }
        let h0 = init::uniform(store, seed, "kg.h0", &[nodes, d], 0.1)?;
        let layers = (0..layers)
            .map(|l| {
                Ok((
                    init::matrix(store, seed, &format!("kg.{l}.w"), d, d)?,
                    init::constant(store, &format!("kg.{l}.b"), &[d], 0.0)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { h0, layers })
    }
}

/// `H ← ReLU(P · H · W + b)` per layer, on a tape.
pub fn gcn_forward_tape<'t>(params: &[Var<'t>], gcn: &Gcn, graph: &MedicalKnowledgeGraph) -> Result<Var<'t>> {
    let n = graph.len();
    let h0 = params[gcn.h0.0];
    if h0.shape()[0] != n {
        return Err(Error::DimensionMismatch {
            left: h0.shape()[0],
            right: n,
        });
    }
    let tape = h0.tape();
    let p = tape.constant(Tensor::new(&[n, n], graph.propagation().to_vec())?);
    let mut h = h0;
    for &(w, b) in &gcn.layers {
        h = p.matmul(h)?.matmul(params[w.0])?.add(params[b.0])?.relu();
    }
    Ok(h)
}

/// Eval-mode knowledge matrix; fails if any value is non-finite.
pub fn gcn_forward(store: &ParamStore, gcn: &Gcn, graph: &MedicalKnowledgeGraph) -> Result<Tensor> {
    let tape = Tape::inference();
    let params = store.bind_frozen(&tape);
    let out = gcn_forward_tape(&params, gcn, graph)?.value();
    if !out.all_finite() {
        return Err(Error::NonFinite("GCN output".into()));
    }
    Ok(out)
}
