use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_all, BeamConfig, SnapshotDecoder};
use crate::corpus::{detokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{gate_statistics, Example, Snapshot};

/// One line of generation JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub stay_id: String,
    pub generated: String,
    pub reference: String,
    pub score: f64,
    /// Mean experience and knowledge gate activations; null when a gate is
    /// not part of the model.
    pub gate_means: [Option<f64>; 2],
}

/// Decode `examples` and pair each output with its reference text.
pub fn generate(
    snapshot: &Snapshot<'_>,
    examples: &[&Example],
    references: &[String],
    vocab: &Vocabulary,
    config: &BeamConfig,
) -> Result<Vec<GenerationRecord>> {
    if examples.len() != references.len() {
        return Err(Error::DimensionMismatch {
            left: examples.len(),
            right: references.len(),
        });
    }
    let batch = snapshot.prepare(examples)?;
    let decoder = SnapshotDecoder {
        snapshot,
        batch: &batch,
    };
    let ids: Vec<usize> = (0..examples.len()).collect();
    let decoded = decode_all(&decoder, &ids, config)?;
    let model = snapshot.model();
    decoded
        .into_iter()
        .zip(examples.iter().zip(references))
        .map(|(d, (ex, reference))| {
            let gate_means = if model.toggles.refine {
                let g = gate_statistics(model, &[&d.state])?;
                [g.experience, g.knowledge]
            } else {
                [None, None]
            };
            Ok(GenerationRecord {
                stay_id: ex.stay_id.clone(),
                generated: detokenize(&vocab.decode(&d.tokens)),
                reference: reference.clone(),
                score: d.score,
                gate_means,
            })
        })
        .collect()
}

pub fn write_generations(records: &[GenerationRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = io::read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
