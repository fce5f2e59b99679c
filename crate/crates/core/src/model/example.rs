use crate::corpus::{encode_tokens, PatientStay, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Toggles};
use crate::retrieval::{neighbours_for, ExperienceBank};

/// One stay in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub stay_id: String,
    pub record: Vec<usize>,
    /// Instruction ids followed by EOS.
    pub target: Vec<usize>,
    /// Bank rows of the retrieved neighbours, grouped in family order.
    pub experience: Vec<usize>,
}

impl Example {
    /// BOS followed by the target without its final token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.target.len());
        ids.push(BOS);
        ids.extend_from_slice(&self.target[..self.target.len() - 1]);
        ids
    }

    /// The reference instruction ids without EOS.
    pub fn reference(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

/// Encode stays and attach their retrieved neighbours. Pass `exclude_self`
/// for stays that are themselves in the bank.
pub fn make_examples(
    stays: &[&PatientStay],
    vocab: &Vocabulary,
    bank: &ExperienceBank,
    config: &ModelConfig,
    toggles: &Toggles,
    exclude_self: bool,
) -> Result<Vec<Example>> {
    let settings = config.retrieval_settings(toggles);
    stays
        .iter()
        .map(|stay| {
            let record = encode_tokens(&stay.record_tokens, vocab, config.max_record_len);
            if record.is_empty() {
                return Err(Error::InvalidData(format!("stay {}: empty record", stay.stay_id)));
            }
            let mut target = encode_tokens(&stay.instruction_tokens, vocab, config.max_instruction_len - 1);
            target.push(EOS);
            let experience = if toggles.uses_retrieve() {
                neighbours_for(bank, stay, &settings, exclude_self)?.rows().collect()
            } else {
                Vec::new()
            };
            Ok(Example {
                stay_id: stay.stay_id.clone(),
                record,
                target,
                experience,
            })
        })
        .collect()
}
