use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{dedup_codes, detokenize, tokenize, ClinicalCode, Family, Gender, PatientStay};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Deserialize, Serialize)]
struct CodeRecord {
    family: Family,
    code: String,
}

/// On-disk form of one stay: raw text fields, tokenized on load.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StayRecord {
    patient_id: String,
    stay_id: String,
    record: String,
    codes: Vec<CodeRecord>,
    age: u32,
    gender: Gender,
    instruction: String,
}

impl StayRecord {
    pub fn from_stay(stay: &PatientStay) -> Self {
        Self {
            patient_id: stay.patient_id.clone(),
            stay_id: stay.stay_id.clone(),
            record: detokenize(&stay.record_tokens),
            codes: stay
                .codes
                .iter()
                .map(|c| CodeRecord {
                    family: c.family,
                    code: c.code.clone(),
                })
                .collect(),
            age: stay.age_years,
            gender: stay.gender,
            instruction: detokenize(&stay.instruction_tokens),
        }
    }

    fn into_stay(self, max_record_len: usize) -> Result<PatientStay> {
        let codes = self
            .codes
            .into_iter()
            .map(|c| ClinicalCode::new(c.family, c.code))
            .collect::<Result<Vec<_>>>()?;
        let mut record_tokens = tokenize(&self.record);
        record_tokens.truncate(max_record_len);
        let stay = PatientStay {
            patient_id: self.patient_id,
            stay_id: self.stay_id,
            record_tokens,
            codes: dedup_codes(codes),
            age_years: self.age,
            gender: self.gender,
            instruction_tokens: tokenize(&self.instruction),
        };
        stay.validate()?;
        Ok(stay)
    }
}

/// Parse JSON-Lines text. Blank lines are skipped; record tokens beyond
/// `max_record_len` are dropped.
pub fn parse_corpus(text: &str, max_record_len: usize) -> Result<Vec<PatientStay>> {
    let mut stays = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let record: StayRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let stay = record.into_stay(max_record_len).map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(stay.stay_id.clone()) {
            return Err(parse_err(format!("duplicate stay_id {:?}", stay.stay_id)));
        }
        stays.push(stay);
    }
    Ok(stays)
}

pub fn load_corpus(path: &Path, max_record_len: usize) -> Result<Vec<PatientStay>> {
    parse_corpus(&io::read_string(path)?, max_record_len)
}

pub fn write_corpus(stays: &[PatientStay]) -> String {
    let mut out = String::new();
    for s in stays {
        out.push_str(&serde_json::to_string(&StayRecord::from_stay(s)).expect("stay serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(stays: &[PatientStay], path: &Path) -> Result<()> {
    io::write_atomic(path, write_corpus(stays).as_bytes())
}
