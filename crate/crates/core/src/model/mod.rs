//! The generation network: a transformer record encoder and a decoder whose
//! cross-attention block fuses the record, retrieved experience and graph
//! knowledge through learned sigmoid gates.

mod example;
mod forward;
mod infer;

use std::collections::BTreeSet;

use pigen_numerics::{decode_checkpoint, encode_checkpoint, ParamId, ParamStore};
use serde::{Deserialize, Serialize};

use crate::corpus::Family;
use crate::error::{Error, Result};
use crate::init;
use crate::knowledge::Gcn;
use crate::retrieval::{InstructionEncoder, RetrievalSettings};

pub use example::{make_examples, Example};
pub use forward::{DropoutPlan, Resources};
pub use infer::{decode_distribution, gate_statistics, DecoderState, GateMeans, PreparedBatch, Snapshot};

/// Which optional information sources feed the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Families whose retrieved instructions form the experience rows.
    pub retrieve: Vec<Family>,
    pub reason: bool,
    /// When off, experience and knowledge terms are added with weight 1.
    pub refine: bool,
}

impl Toggles {
    pub fn baseline() -> Self {
        Self {
            retrieve: vec![],
            reason: false,
            refine: false,
        }
    }

    pub fn full() -> Self {
        Self {
            retrieve: Family::ALL.to_vec(),
            reason: true,
            refine: true,
        }
    }

    pub fn uses_retrieve(&self) -> bool {
        !self.retrieve.is_empty()
    }

    /// Sorted, deduplicated family list.
    pub fn normalized(mut self) -> Self {
        let set: BTreeSet<Family> = self.retrieve.into_iter().collect();
        self.retrieve = set.into_iter().collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub n_p: usize,
    pub demographic_filter: bool,
    pub max_record_len: usize,
    /// Includes the EOS target.
    pub max_instruction_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            gcn_layers: 1,
            dropout: 0.1,
            n_p: 20,
            demographic_filter: false,
            max_record_len: 512,
            max_instruction_len: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.gcn_layers == 0 {
            return bad("layer counts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_p == 0 || self.max_record_len == 0 || self.max_instruction_len < 2 {
            return bad("n_p, max_record_len must be >= 1 and max_instruction_len >= 2".into());
        }
        Ok(())
    }

    pub fn retrieval_settings(&self, toggles: &Toggles) -> RetrievalSettings {
        RetrievalSettings {
            families: toggles.retrieve.clone(),
            n_p: self.n_p,
            demographic_filter: self.demographic_filter,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Gate {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub attn: Attn,
    pub norm1: Norm,
    pub ffn: Ffn,
    pub norm2: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub attn: Attn,
    pub norm1: Norm,
    pub record: Attn,
    pub experience: Attn,
    pub knowledge: Attn,
    pub gate_experience: Gate,
    pub gate_knowledge: Gate,
    pub norm2: Norm,
    pub ffn: Ffn,
    pub norm3: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc_embed: ParamId,
    pub dec_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub instructions: InstructionEncoder,
    pub gcn: Gcn,
}

struct Registrar<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    d: usize,
}

impl Registrar<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        init::matrix(self.store, self.seed, name, rows, cols)
    }

    fn zeros(&mut self, name: &str, len: usize) -> Result<ParamId> {
        init::constant(self.store, name, &[len], 0.0)
    }

    fn attn(&mut self, prefix: &str) -> Result<Attn> {
        let d = self.d;
        Ok(Attn {
            wq: self.matrix(&format!("{prefix}.wq"), d, d)?,
            wk: self.matrix(&format!("{prefix}.wk"), d, d)?,
            wv: self.matrix(&format!("{prefix}.wv"), d, d)?,
            wo: self.matrix(&format!("{prefix}.wo"), d, d)?,
        })
    }

    fn norm(&mut self, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gain: init::constant(self.store, &format!("{prefix}.gain"), &[self.d], 1.0)?,
            bias: self.zeros(&format!("{prefix}.bias"), self.d)?,
        })
    }

    fn ffn(&mut self, prefix: &str) -> Result<Ffn> {
        let d = self.d;
        Ok(Ffn {
            w1: self.matrix(&format!("{prefix}.w1"), d, 4 * d)?,
            b1: self.zeros(&format!("{prefix}.b1"), 4 * d)?,
            w2: self.matrix(&format!("{prefix}.w2"), 4 * d, d)?,
            b2: self.zeros(&format!("{prefix}.b2"), d)?,
        })
    }

    fn gate(&mut self, prefix: &str) -> Result<Gate> {
        let d = self.d;
        Ok(Gate {
            w: self.matrix(&format!("{prefix}.w"), 2 * d, d)?,
            b: self.zeros(&format!("{prefix}.b"), d)?,
        })
    }
}

/// Parameters plus the configuration that fixes their shapes.
#[derive(Debug, Clone)]
pub struct GenerationModel {
    pub config: ModelConfig,
    pub toggles: Toggles,
    pub vocab_size: usize,
    pub graph_nodes: usize,
    pub store: ParamStore,
    pub(crate) layout: Layout,
    pub(crate) positions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
    toggles: Toggles,
    vocab_size: usize,
    graph_nodes: usize,
    vocab_checksum: String,
}

impl GenerationModel {
    /// Every parameter is created regardless of toggles, so a parameter's
    /// initial value depends only on its name and `config.init_seed`.
    pub fn new(config: ModelConfig, toggles: Toggles, vocab_size: usize, graph_nodes: usize) -> Result<Self> {
        config.validate()?;
        let toggles = toggles.normalized();
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        let d = config.d;
        let mut store = ParamStore::new();
        let mut r = Registrar {
            store: &mut store,
            seed: config.init_seed,
            d,
        };
        let embed_bound = 3f64.sqrt();
        let enc_embed = init::uniform(r.store, r.seed, "enc.embed", &[vocab_size, d], embed_bound)?;
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    attn: r.attn(&format!("enc.{l}.self"))?,
                    norm1: r.norm(&format!("enc.{l}.ln1"))?,
                    ffn: r.ffn(&format!("enc.{l}.ffn"))?,
                    norm2: r.norm(&format!("enc.{l}.ln2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_embed = init::uniform(r.store, r.seed, "dec.embed", &[vocab_size, d], embed_bound)?;
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                Ok(DecoderLayer {
                    attn: r.attn(&format!("dec.{l}.self"))?,
                    norm1: r.norm(&format!("dec.{l}.ln1"))?,
                    record: r.attn(&format!("dec.{l}.rec"))?,
                    experience: r.attn(&format!("dec.{l}.exp"))?,
                    knowledge: r.attn(&format!("dec.{l}.kg"))?,
                    gate_experience: r.gate(&format!("dec.{l}.gate_exp"))?,
                    gate_knowledge: r.gate(&format!("dec.{l}.gate_kg"))?,
                    norm2: r.norm(&format!("dec.{l}.ln2"))?,
                    ffn: r.ffn(&format!("dec.{l}.ffn"))?,
                    norm3: r.norm(&format!("dec.{l}.ln3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_w = r.matrix("out.w", d, vocab_size)?;
        let out_b = r.zeros("out.b", vocab_size)?;
        let instructions = InstructionEncoder::register(&mut store, config.init_seed, vocab_size, d, d)?;
        let gcn = Gcn::register(&mut store, config.init_seed, graph_nodes.max(1), d, config.gcn_layers)?;
        let max_pos = config.max_record_len.max(config.max_instruction_len).max(512) + 1;
        Ok(Self {
            positions: sinusoid_table(max_pos, d),
            config,
            toggles,
            vocab_size,
            graph_nodes,
            store,
            layout: Layout {
                enc_embed,
                dec_embed,
                encoder,
                decoder,
                out_w,
                out_b,
                instructions,
                gcn,
            },
        })
    }

    pub(crate) fn position(&self, pos: usize) -> &[f64] {
        let d = self.config.d;
        &self.positions[pos * d..(pos + 1) * d]
    }

    /// Serialized parameters plus the configuration needed to rebuild them.
    pub fn to_checkpoint(&self, vocab_checksum: &str) -> Result<Vec<u8>> {
        let config = CheckpointConfig {
            model: self.config.clone(),
            toggles: self.toggles.clone(),
            vocab_size: self.vocab_size,
            graph_nodes: self.graph_nodes,
            vocab_checksum: vocab_checksum.to_string(),
        };
        Ok(encode_checkpoint(&self.store, serde_json::to_value(config).expect("config serializes"))?)
    }

    /// Rebuild a model from checkpoint bytes, refusing a vocabulary mismatch.
    pub fn from_checkpoint(bytes: &[u8], vocab_checksum: &str) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes)?;
        let config: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Incompatible(format!("checkpoint config: {e}")))?;
        if config.vocab_checksum != vocab_checksum {
            return Err(Error::Incompatible(
                "checkpoint was trained with a different vocabulary".into(),
            ));
        }
        let mut model = Self::new(config.model, config.toggles, config.vocab_size, config.graph_nodes)?;
        ckpt.apply_to(&mut model.store)?;
        Ok(model)
    }
}

fn sinusoid_table(max_pos: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_pos * d];
    for pos in 0..max_pos {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}
