//! Data model, tokenization, vocabulary, corpus I/O, splitting, and the
//! synthetic corpus generator.

mod jsonl;
mod split;
pub mod synth;
mod tokenize;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{load_corpus, parse_corpus, save_corpus, write_corpus, StayRecord};
pub use split::{split_by_patient, DatasetSplit, SplitRole};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{build_vocab, encode_tokens, Vocabulary, BOS, EOS, PAD, RESERVED_TOKENS, UNK};

/// Minimum instruction length (in tokens) for a stay to enter a corpus.
pub const MIN_INSTRUCTION_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Diagnosis,
    Medication,
    Procedure,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Diagnosis, Family::Medication, Family::Procedure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Diagnosis => "diagnosis",
            Family::Medication => "medication",
            Family::Procedure => "procedure",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(Family::Diagnosis),
            "medication" => Ok(Family::Medication),
            "procedure" => Ok(Family::Procedure),
            other => Err(Error::InvalidData(format!("unknown code family {other:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClinicalCode {
    pub family: Family,
    pub code: String,
}

impl ClinicalCode {
    pub fn new(family: Family, code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(char::is_whitespace) {
            return Err(Error::InvalidData(format!("invalid clinical code {code:?}")));
        }
        Ok(Self { family, code })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

/// The three age bands used for demographic matching and stratified
/// reporting: under 55, 55 to 69, and 70 or older.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Under55,
    From55To69,
    From70,
}

impl AgeGroup {
    pub fn of(age_years: u32) -> Self {
        match age_years {
            0..=54 => AgeGroup::Under55,
            55..=69 => AgeGroup::From55To69,
            _ => AgeGroup::From70,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Under55 => "age<55",
            AgeGroup::From55To69 => "55<=age<70",
            AgeGroup::From70 => "age>=70",
        }
    }
}

/// One hospitalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStay {
    pub patient_id: String,
    pub stay_id: String,
    pub record_tokens: Vec<String>,
    /// Deduplicated, in first-seen order.
    pub codes: Vec<ClinicalCode>,
    pub age_years: u32,
    pub gender: Gender,
    pub instruction_tokens: Vec<String>,
}

impl PatientStay {
    pub fn codes_in(&self, family: Family) -> impl Iterator<Item = &ClinicalCode> {
        self.codes.iter().filter(move |c| c.family == family)
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.codes.iter().any(|c| c.code == code)
    }

    pub fn age_group(&self) -> AgeGroup {
        AgeGroup::of(self.age_years)
    }

    /// Check the corpus-level invariants for a single stay.
    pub fn validate(&self) -> Result<()> {
        if self.instruction_tokens.len() < MIN_INSTRUCTION_TOKENS {
            return Err(Error::InvalidData(format!(
                "stay {}: instruction too short ({} tokens, need {MIN_INSTRUCTION_TOKENS})",
                self.stay_id,
                self.instruction_tokens.len()
            )));
        }
        if self.record_tokens.is_empty() {
            return Err(Error::InvalidData(format!("stay {}: empty record", self.stay_id)));
        }
        if self.stay_id.is_empty() || self.patient_id.is_empty() {
            return Err(Error::InvalidData("empty patient_id or stay_id".into()));
        }
        Ok(())
    }
}

/// Remove duplicate codes while keeping first-seen order.
pub(crate) fn dedup_codes(codes: Vec<ClinicalCode>) -> Vec<ClinicalCode> {
    let mut seen = std::collections::HashSet::new();
    codes.into_iter().filter(|c| seen.insert(c.clone())).collect()
}
