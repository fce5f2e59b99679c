//! Incremental decoding over a frozen parameter snapshot. Memories (record,
//! experience, knowledge) are projected to keys/values once; each step only
//! processes the newest token and extends a per-hypothesis key/value cache.

use pigen_numerics::kernels::{self, AttentionLayout};
use pigen_numerics::{ParamId, Tape, Tensor};
use serde::Serialize;

use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::model::{Attn, DropoutPlan, Example, Ffn, Gate, GenerationModel, Norm, Resources};

type KeyValues = (Vec<f64>, Vec<f64>);

/// Frozen model plus memories shared by every example.
pub struct Snapshot<'m> {
    model: &'m GenerationModel,
    /// Per decoder layer: every bank row projected to keys/values.
    experience: Option<Vec<KeyValues>>,
    /// Per decoder layer: every graph node projected to keys/values.
    knowledge: Option<Vec<KeyValues>>,
}

pub struct PreparedExample {
    record: Vec<KeyValues>,
    record_len: usize,
    experience: Vec<usize>,
}

/// Per-example memories for a list of examples, indexed like the input.
pub struct PreparedBatch {
    examples: Vec<PreparedExample>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Decoding state of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub example: usize,
    pub position: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    gate_sums: [f64; 2],
    gate_counts: [usize; 2],
    gate_range: [(f64, f64); 2],
}

/// Average gate activations (experience, knowledge); `None` when the
/// corresponding source is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateMeans {
    pub experience: Option<f64>,
    pub knowledge: Option<f64>,
}

impl DecoderState {
    pub fn gate_sums(&self) -> ([f64; 2], [usize; 2]) {
        (self.gate_sums, self.gate_counts)
    }

    /// Smallest and largest gate activation seen so far, per source;
    /// `None` before any gate has fired.
    pub fn gate_range(&self) -> [Option<(f64, f64)>; 2] {
        std::array::from_fn(|i| (self.gate_counts[i] > 0).then_some(self.gate_range[i]))
    }
}

/// Average gate values over steps, dimensions, layers and all given states.
pub fn gate_statistics(model: &GenerationModel, states: &[&DecoderState]) -> Result<GateMeans> {
    if !model.toggles.refine {
        return Err(Error::Config("gate statistics need the refine gates enabled".into()));
    }
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for s in states {
        for i in 0..2 {
            sums[i] += s.gate_sums[i];
            counts[i] += s.gate_counts[i];
        }
    }
    let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    Ok(GateMeans {
        experience: mean(0),
        knowledge: mean(1),
    })
}

fn affine(x: &[f64], rows: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = kernels::matmul(x, w.data(), rows, k, n);
    if let Some(b) = b {
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    out
}

fn attend(q: &[f64], k: &[f64], v: &[f64], keys: Vec<usize>, d: usize, heads: usize) -> Vec<f64> {
    let mut layout = AttentionLayout::new();
    layout.push(0..1, keys, false);
    let mut out = vec![0.0; d];
    kernels::attention_forward(q, k, v, d, heads, &layout, &mut out, None);
    out
}

impl<'m> Snapshot<'m> {
    pub fn new(model: &'m GenerationModel, res: &Resources<'_>) -> Result<Self> {
        let tape = Tape::inference();
        let p = model.store.bind_frozen(&tape);
        let project = |m: &Tensor, pick: fn(&super::DecoderLayer) -> Attn| -> Vec<KeyValues> {
            model
                .layout
                .decoder
                .iter()
                .map(|l| {
                    let a = pick(l);
                    (
                        affine(m.data(), m.rows(), model.param(a.wk), None),
                        affine(m.data(), m.rows(), model.param(a.wv), None),
                    )
                })
                .collect()
        };
        let experience = if model.toggles.uses_retrieve() {
            let rows: Vec<usize> = (0..res.bank.len()).collect();
            let m = model.encode_bank_rows(&p, res.bank, &rows)?.value();
            if !m.all_finite() {
                return Err(Error::NonFinite("experience encodings".into()));
            }
            Some(project(&m, |l| l.experience))
        } else {
            None
        };
        let knowledge = match model.knowledge_memory(&p, res.graph)? {
            Some(kg) => {
                let kg = kg.value();
                if !kg.all_finite() {
                    return Err(Error::NonFinite("GCN output".into()));
                }
                Some(project(&kg, |l| l.knowledge))
            }
            None => None,
        };
        Ok(Self {
            model,
            experience,
            knowledge,
        })
    }

    pub fn model(&self) -> &GenerationModel {
        self.model
    }

    /// Encode records and project them for every decoder layer.
    pub fn prepare(&self, batch: &[&Example]) -> Result<PreparedBatch> {
        let model = self.model;
        let d = model.config.d;
        let mut examples = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(64) {
            let tape = Tape::inference();
            let p = model.store.bind_frozen(&tape);
            let records: Vec<&[usize]> = chunk.iter().map(|e| e.record.as_slice()).collect();
            let (encoded, segments) = model.encode_records(&p, &records, &DropoutPlan::eval())?;
            let encoded = encoded.value();
            if !encoded.all_finite() {
                return Err(Error::NonFinite("record encoder".into()));
            }
            for (ex, seg) in chunk.iter().zip(segments) {
                if model.toggles.uses_retrieve() && ex.experience.is_empty() {
                    return Err(Error::Incompatible(format!(
                        "stay {} has no retrieved experience but retrieval is enabled",
                        ex.stay_id
                    )));
                }
                let rows = &encoded.data()[seg.start * d..seg.end * d];
                let record = model
                    .layout
                    .decoder
                    .iter()
                    .map(|l| {
                        (
                            affine(rows, seg.len(), model.param(l.record.wk), None),
                            affine(rows, seg.len(), model.param(l.record.wv), None),
                        )
                    })
                    .collect();
                examples.push(PreparedExample {
                    record,
                    record_len: seg.len(),
                    experience: ex.experience.clone(),
                });
            }
        }
        Ok(PreparedBatch { examples })
    }

    pub fn start(&self, example: usize) -> DecoderState {
        let layers = self.model.layout.decoder.len();
        DecoderState {
            example,
            position: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            gate_sums: [0.0; 2],
            gate_counts: [0; 2],
            gate_range: [(f64::INFINITY, f64::NEG_INFINITY); 2],
        }
    }

    /// Feed one token to each state; returns `states.len() × |V|` logits.
    pub fn step(&self, batch: &PreparedBatch, states: &mut [DecoderState], tokens: &[usize]) -> Result<Vec<f64>> {
        let model = self.model;
        let (d, heads, v) = (model.config.d, model.config.heads, model.vocab_size);
        let b = states.len();
        if tokens.len() != b {
            return Err(Error::DimensionMismatch {
                left: tokens.len(),
                right: b,
            });
        }
        let embed = model.param(model.layout.dec_embed);
        let mut x = Vec::with_capacity(b * d);
        for (s, &t) in states.iter().zip(tokens) {
            if t >= v {
                return Err(Error::InvalidData(format!("token id {t} outside vocabulary of {v}")));
            }
            if (s.position + 1) * d > model.positions.len() {
                return Err(Error::InvalidData("decoding beyond the supported sequence length".into()));
            }
            let pos = model.position(s.position);
            x.extend(embed.row(t).iter().zip(pos).map(|(e, p)| e + p));
        }
        for (l, layer) in model.layout.decoder.iter().enumerate() {
            let q = affine(&x, b, model.param(layer.attn.wq), None);
            let k = affine(&x, b, model.param(layer.attn.wk), None);
            let vv = affine(&x, b, model.param(layer.attn.wv), None);
            let mut s = Vec::with_capacity(b * d);
            for (i, st) in states.iter_mut().enumerate() {
                st.keys[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                st.values[l].extend_from_slice(&vv[i * d..(i + 1) * d]);
                let len = st.keys[l].len() / d;
                s.extend(attend(&q[i * d..(i + 1) * d], &st.keys[l], &st.values[l], (0..len).collect(), d, heads));
            }
            let s = affine(&s, b, model.param(layer.attn.wo), None);
            let h = self.residual_norm(&x, &s, &layer.norm1);

            let mut refined = self.cross(&h, states, &layer.record, |ex, idx| {
                let (k, v) = &batch.examples[ex].record[idx];
                (k.as_slice(), v.as_slice(), (0..batch.examples[ex].record_len).collect())
            }, l);
            if let Some(exp) = &self.experience {
                let term = self.cross(&h, states, &layer.experience, |ex, idx| {
                    let (k, v) = &exp[idx];
                    (k.as_slice(), v.as_slice(), batch.examples[ex].experience.clone())
                }, l);
                self.add_gated(&mut refined, &h, &term, &layer.gate_experience, states, 0);
            }
            if let Some(kg) = &self.knowledge {
                let nodes = model.graph_nodes;
                let term = self.cross(&h, states, &layer.knowledge, |_, idx| {
                    let (k, v) = &kg[idx];
                    (k.as_slice(), v.as_slice(), (0..nodes).collect())
                }, l);
                self.add_gated(&mut refined, &h, &term, &layer.gate_knowledge, states, 1);
            }
            let r = self.residual_norm(&h, &refined, &layer.norm2);
            let f = self.ffn(&r, b, &layer.ffn);
            x = self.residual_norm(&r, &f, &layer.norm3);
        }
        for s in states.iter_mut() {
            s.position += 1;
        }
        let logits = affine(&x, b, model.param(model.layout.out_w), Some(model.param(model.layout.out_b)));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(logits)
    }

    fn residual_norm(&self, x: &[f64], delta: &[f64], n: &Norm) -> Vec<f64> {
        let m = self.model;
        let sum: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
        kernels::layer_norm_rows(&sum, m.config.d, m.param(n.gain).data(), m.param(n.bias).data())
    }

    fn ffn(&self, x: &[f64], rows: usize, f: &Ffn) -> Vec<f64> {
        let m = self.model;
        let mut h = affine(x, rows, m.param(f.w1), Some(m.param(f.b1)));
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        affine(&h, rows, m.param(f.w2), Some(m.param(f.b2)))
    }

    fn cross<'a, F>(
        &self,
        h: &[f64],
        states: &[DecoderState],
        a: &Attn,
        memory: F,
        layer: usize,
    ) -> Vec<f64>
    where
        F: Fn(usize, usize) -> (&'a [f64], &'a [f64], Vec<usize>),
    {
        let m = self.model;
        let (d, heads) = (m.config.d, m.config.heads);
        let b = states.len();
        let q = affine(h, b, m.param(a.wq), None);
        let mut out = Vec::with_capacity(b * d);
        for (i, st) in states.iter().enumerate() {
            let (k, v, keys) = memory(st.example, layer);
            out.extend(attend(&q[i * d..(i + 1) * d], k, v, keys, d, heads));
        }
        affine(&out, b, m.param(a.wo), None)
    }

    fn add_gated(
        &self,
        acc: &mut [f64],
        h: &[f64],
        term: &[f64],
        g: &Gate,
        states: &mut [DecoderState],
        which: usize,
    ) {
        let m = self.model;
        let d = m.config.d;
        if !m.toggles.refine {
            acc.iter_mut().zip(term).for_each(|(a, t)| *a += t);
            return;
        }
        let b = states.len();
        let mut joined = Vec::with_capacity(b * 2 * d);
        for i in 0..b {
            joined.extend_from_slice(&h[i * d..(i + 1) * d]);
            joined.extend_from_slice(&term[i * d..(i + 1) * d]);
        }
        let logits = affine(&joined, b, m.param(g.w), Some(m.param(g.b)));
        for (i, st) in states.iter_mut().enumerate() {
            for c in 0..d {
                let lambda = kernels::sigmoid(logits[i * d + c]);
                acc[i * d + c] += lambda * term[i * d + c];
                st.gate_sums[which] += lambda;
                let range = &mut st.gate_range[which];
                *range = (range.0.min(lambda), range.1.max(lambda));
            }
            st.gate_counts[which] += d;
        }
    }
}

impl GenerationModel {
    pub(crate) fn param(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }
}

/// Next-token distribution after feeding `prefix` (which must start with BOS).
pub fn decode_distribution(
    snapshot: &Snapshot<'_>,
    batch: &PreparedBatch,
    example: usize,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::InvalidData("decoding prefix must start with BOS".into()));
    }
    if example >= batch.len() {
        return Err(Error::InvalidData(format!("example {example} not prepared")));
    }
    let mut state = [snapshot.start(example)];
    let mut logits = Vec::new();
    for &t in prefix {
        logits = snapshot.step(batch, &mut state, &[t])?;
    }
    kernels::softmax_in_place(&mut logits);
    Ok(logits)
}
