//! Differentiable forward pass over a packed batch: sequences of different
//! lengths are concatenated row-wise and attention layouts keep examples
//! apart, so no padding is ever materialized.

use std::cell::Cell;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use pigen_numerics::{attention, embedding_lookup, AttentionLayout, Tensor, Var};

use crate::error::{Error, Result};
use crate::knowledge::{gcn_forward_tape, MedicalKnowledgeGraph};
use crate::model::{Attn, Example, Ffn, Gate, GenerationModel, Norm};
use crate::retrieval::{encode_instructions, ExperienceBank};

/// Shared read-only inputs of the decoder memories.
#[derive(Debug, Clone, Copy)]
pub struct Resources<'a> {
    pub bank: &'a ExperienceBank,
    pub graph: &'a MedicalKnowledgeGraph,
}

/// Dropout settings for one forward pass; each application draws a fresh
/// mask from `seed` and a running counter.
#[derive(Debug)]
pub struct DropoutPlan {
    pub p: f64,
    pub seed: u64,
    pub train: bool,
    counter: Cell<u64>,
}

impl DropoutPlan {
    pub fn eval() -> Self {
        Self::new(0.0, 0, false)
    }

    pub fn new(p: f64, seed: u64, train: bool) -> Self {
        Self {
            p,
            seed,
            train,
            counter: Cell::new(0),
        }
    }

    fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = self.counter.get();
        self.counter.set(n + 1);
        let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(n);
        Ok(x.dropout(self.p, seed, self.train)?)
    }
}

pub(crate) struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

pub(crate) fn pack(seqs: &[&[usize]]) -> Packed {
    let mut p = Packed {
        ids: Vec::new(),
        positions: Vec::new(),
        segments: Vec::new(),
    };
    for s in seqs {
        let start = p.ids.len();
        p.ids.extend_from_slice(s);
        p.positions.extend(0..s.len());
        p.segments.push(start..p.ids.len());
    }
    p
}

fn linear<'t>(p: &[Var<'t>], x: Var<'t>, w: pigen_numerics::ParamId) -> Result<Var<'t>> {
    Ok(x.matmul(p[w.0])?)
}

fn norm<'t>(p: &[Var<'t>], x: Var<'t>, n: &Norm) -> Result<Var<'t>> {
    Ok(x.layer_norm(p[n.gain.0], p[n.bias.0])?)
}

fn ffn<'t>(p: &[Var<'t>], x: Var<'t>, f: &Ffn) -> Result<Var<'t>> {
    let h = linear(p, x, f.w1)?.add(p[f.b1.0])?.relu();
    Ok(linear(p, h, f.w2)?.add(p[f.b2.0])?)
}

fn gate<'t>(p: &[Var<'t>], h: Var<'t>, term: Var<'t>, g: &Gate) -> Result<Var<'t>> {
    Ok(h.concat(term)?.matmul(p[g.w.0])?.add(p[g.b.0])?.sigmoid())
}

/// Keys and values projected from a memory matrix.
struct Memory<'t> {
    k: Var<'t>,
    v: Var<'t>,
}

fn memory<'t>(p: &[Var<'t>], m: Var<'t>, a: &Attn) -> Result<Memory<'t>> {
    Ok(Memory {
        k: linear(p, m, a.wk)?,
        v: linear(p, m, a.wv)?,
    })
}

fn mha<'t>(
    p: &[Var<'t>],
    x: Var<'t>,
    mem: &Memory<'t>,
    a: &Attn,
    heads: usize,
    layout: &Arc<AttentionLayout>,
) -> Result<Var<'t>> {
    let q = linear(p, x, a.wq)?;
    let out = attention(q, mem.k, mem.v, heads, layout.clone())?;
    linear(p, out, a.wo)
}

impl GenerationModel {
    fn embed<'t>(&self, p: &[Var<'t>], table: pigen_numerics::ParamId, packed: &Packed) -> Result<Var<'t>> {
        if let Some(&bad) = packed.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::InvalidData(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let d = self.config.d;
        let mut pos = Vec::with_capacity(packed.ids.len() * d);
        for &t in &packed.positions {
            if t * d >= self.positions.len() {
                return Err(Error::InvalidData(format!("sequence position {t} beyond supported length")));
            }
            pos.extend_from_slice(self.position(t));
        }
        let tape = p[table.0].tape();
        let pos = tape.constant(Tensor::new(&[packed.ids.len(), d], pos)?);
        Ok(embedding_lookup(p[table.0], &packed.ids)?.add(pos)?)
    }

    /// Packed encoder output rows and the segment of each record.
    pub fn encode_records<'t>(
        &self,
        p: &[Var<'t>],
        records: &[&[usize]],
        dropout: &DropoutPlan,
    ) -> Result<(Var<'t>, Vec<Range<usize>>)> {
        if records.iter().any(|r| r.is_empty()) {
            return Err(Error::InvalidData("cannot encode an empty record".into()));
        }
        let packed = pack(records);
        let layout = Arc::new(AttentionLayout::self_attention(&packed.segments, false));
        let mut x = self.embed(p, self.layout.enc_embed, &packed)?;
        for layer in &self.layout.encoder {
            let mem = memory(p, x, &layer.attn)?;
            let s = mha(p, x, &mem, &layer.attn, self.config.heads, &layout)?;
            let a = norm(p, x.add(dropout.apply(s)?)?, &layer.norm1)?;
            let f = ffn(p, a, &layer.ffn)?;
            x = norm(p, a.add(dropout.apply(f)?)?, &layer.norm2)?;
        }
        Ok((x, packed.segments))
    }

    /// Encoded experience rows (deduplicated across the batch) and, per
    /// example, the indices of its rows within that matrix.
    pub(crate) fn experience_memory<'t>(
        &self,
        p: &[Var<'t>],
        batch: &[&Example],
        bank: &ExperienceBank,
    ) -> Result<Option<(Var<'t>, Vec<Vec<usize>>)>> {
        if !self.toggles.uses_retrieve() {
            return Ok(None);
        }
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut keys = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.experience.is_empty() {
                return Err(Error::Incompatible(format!(
                    "stay {} has no retrieved experience but retrieval is enabled",
                    ex.stay_id
                )));
            }
            let mut ks = Vec::with_capacity(ex.experience.len());
            for &row in &ex.experience {
                if row >= bank.len() {
                    return Err(Error::Incompatible(format!("experience row {row} outside the bank")));
                }
                let next = unique.len();
                let s = *slot.entry(row).or_insert_with(|| {
                    unique.push(row);
                    next
                });
                ks.push(s);
            }
            keys.push(ks);
        }
        Ok(Some((self.encode_bank_rows(p, bank, &unique)?, keys)))
    }

    pub(crate) fn encode_bank_rows<'t>(&self, p: &[Var<'t>], bank: &ExperienceBank, rows: &[usize]) -> Result<Var<'t>> {
        let seqs: Vec<&[usize]> = rows.iter().map(|&r| bank.entries()[r].instruction.as_slice()).collect();
        encode_instructions(p, &self.layout.instructions, &seqs)
    }

    pub(crate) fn knowledge_memory<'t>(&self, p: &[Var<'t>], graph: &MedicalKnowledgeGraph) -> Result<Option<Var<'t>>> {
        if !self.toggles.reason {
            return Ok(None);
        }
        if graph.len() != self.graph_nodes {
            return Err(Error::Incompatible(format!(
                "graph has {} nodes but the model was built for {}",
                graph.len(),
                self.graph_nodes
            )));
        }
        Ok(Some(gcn_forward_tape(p, &self.layout.gcn, graph)?))
    }

    /// Teacher-forced logits, one row per target token of every example.
    pub fn forward_logits<'t>(
        &self,
        p: &[Var<'t>],
        batch: &[&Example],
        res: &Resources<'_>,
        dropout: &DropoutPlan,
    ) -> Result<Var<'t>> {
        if batch.is_empty() {
            return Err(Error::InvalidData("empty batch".into()));
        }
        let heads = self.config.heads;
        let records: Vec<&[usize]> = batch.iter().map(|e| e.record.as_slice()).collect();
        let (encoded, rec_segments) = self.encode_records(p, &records, dropout)?;
        let experience = self.experience_memory(p, batch, res.bank)?;
        let knowledge = self.knowledge_memory(p, res.graph)?;

        let inputs: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_input()).collect();
        let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let packed = pack(&input_refs);
        let self_layout = Arc::new(AttentionLayout::self_attention(&packed.segments, true));
        let mut rec_layout = AttentionLayout::new();
        let mut exp_layout = AttentionLayout::new();
        let mut kg_layout = AttentionLayout::new();
        for (i, seg) in packed.segments.iter().enumerate() {
            rec_layout.push(seg.clone(), rec_segments[i].clone().collect(), false);
            if let Some((_, keys)) = &experience {
                exp_layout.push(seg.clone(), keys[i].clone(), false);
            }
            if knowledge.is_some() {
                kg_layout.push(seg.clone(), (0..self.graph_nodes).collect(), false);
            }
        }
        let (rec_layout, exp_layout, kg_layout) = (Arc::new(rec_layout), Arc::new(exp_layout), Arc::new(kg_layout));

        let mut x = self.embed(p, self.layout.dec_embed, &packed)?;
        for layer in &self.layout.decoder {
            let mem = memory(p, x, &layer.attn)?;
            let s = mha(p, x, &mem, &layer.attn, heads, &self_layout)?;
            let h = norm(p, x.add(dropout.apply(s)?)?, &layer.norm1)?;

            let rec = memory(p, encoded, &layer.record)?;
            let mut refined = mha(p, h, &rec, &layer.record, heads, &rec_layout)?;
            if let Some((exp, _)) = &experience {
                let mem = memory(p, *exp, &layer.experience)?;
                let term = mha(p, h, &mem, &layer.experience, heads, &exp_layout)?;
                refined = refined.add(self.gated(p, h, term, &layer.gate_experience)?)?;
            }
            if let Some(kg) = knowledge {
                let mem = memory(p, kg, &layer.knowledge)?;
                let term = mha(p, h, &mem, &layer.knowledge, heads, &kg_layout)?;
                refined = refined.add(self.gated(p, h, term, &layer.gate_knowledge)?)?;
            }
            let r = norm(p, h.add(dropout.apply(refined)?)?, &layer.norm2)?;
            let f = ffn(p, r, &layer.ffn)?;
            x = norm(p, r.add(dropout.apply(f)?)?, &layer.norm3)?;
        }
        Ok(linear(p, x, self.layout.out_w)?.add(p[self.layout.out_b.0])?)
    }

    fn gated<'t>(&self, p: &[Var<'t>], h: Var<'t>, term: Var<'t>, g: &Gate) -> Result<Var<'t>> {
        if self.toggles.refine {
            Ok(gate(p, h, term, g)?.mul(term)?)
        } else {
            Ok(term)
        }
    }

    /// Mean token cross-entropy of the batch under teacher forcing.
    pub fn forward_loss<'t>(
        &self,
        p: &[Var<'t>],
        batch: &[&Example],
        res: &Resources<'_>,
        dropout: &DropoutPlan,
    ) -> Result<Var<'t>> {
        let logits = self.forward_logits(p, batch, res, dropout)?;
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.target.iter().copied()).collect();
        let mask = vec![true; targets.len()];
        Ok(logits.cross_entropy(&targets, &mask)?)
    }
}
