//! Similar-patient retrieval over per-family clinical-code vectors and the
//! learned encoder that turns retrieved instructions into experience rows.

mod bank;
mod encoder;

use std::cmp::Ordering;

use pigen_numerics::{ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{AgeGroup, Family, Gender, PatientStay};
use crate::error::{Error, Result};

pub use bank::{BankEntry, ExperienceBank, FamilyIndex};
pub use encoder::{encode_instructions, InstructionEncoder};

/// Average of the one-hot vectors of a stay's codes in one family.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVector {
    pub family: Family,
    pub values: Vec<f64>,
}

impl CodeVector {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Same gender and same age band as the query patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicFilter {
    pub gender: Gender,
    pub age_group: AgeGroup,
}

impl DemographicFilter {
    pub fn for_stay(stay: &PatientStay) -> Self {
        Self {
            gender: stay.gender,
            age_group: stay.age_group(),
        }
    }

    pub fn matches(&self, entry: &BankEntry) -> bool {
        entry.gender == self.gender && AgeGroup::of(entry.age_years) == self.age_group
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub row: usize,
    pub score: f64,
    /// True for repeats appended because too few candidates survived.
    pub padded: bool,
}

/// Top `n_p` bank rows by cosine to `query`, ties by ascending stay id.
pub fn retrieve_topk(
    bank: &ExperienceBank,
    query: &CodeVector,
    n_p: usize,
    exclude_stay_id: Option<&str>,
    filter: Option<&DemographicFilter>,
) -> Result<Vec<Retrieved>> {
    if n_p == 0 {
        return Err(Error::Config("N_P must be at least 1".into()));
    }
    let index = bank.family(query.family);
    let mut scored = Vec::with_capacity(bank.len());
    for (row, entry) in bank.entries().iter().enumerate() {
        if exclude_stay_id == Some(entry.stay_id.as_str()) {
            continue;
        }
        if filter.is_some_and(|f| !f.matches(entry)) {
            continue;
        }
        scored.push((row, cosine(&query.values, index.vector(row))?));
    }
    if scored.is_empty() {
        return Err(Error::EmptyBank(format!(
            "no {} candidates left after exclusion and filtering",
            query.family
        )));
    }
    let entries = bank.entries();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| entries[a.0].stay_id.cmp(&entries[b.0].stay_id))
    });
    scored.truncate(n_p);
    let mut out: Vec<Retrieved> = scored
        .into_iter()
        .map(|(row, score)| Retrieved { row, score, padded: false })
        .collect();
    let last = out.last().cloned().expect("non-empty");
    while out.len() < n_p {
        out.push(Retrieved { padded: true, ..last.clone() });
    }
    Ok(out)
}

/// Which families feed the experience matrix, and how many neighbours each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub families: Vec<Family>,
    pub n_p: usize,
    pub demographic_filter: bool,
}

/// Retrieved bank rows for one query stay, grouped in family order.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbours {
    pub hits: Vec<(Family, Retrieved)>,
}

impl Neighbours {
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.hits.iter().map(|(_, r)| r.row)
    }
}

/// Run retrieval for every family in `settings`, in canonical family order.
/// Training queries pass `exclude_self` so a stay never retrieves itself.
pub fn neighbours_for(
    bank: &ExperienceBank,
    stay: &PatientStay,
    settings: &RetrievalSettings,
    exclude_self: bool,
) -> Result<Neighbours> {
    let filter = settings.demographic_filter.then(|| DemographicFilter::for_stay(stay));
    let mut hits = Vec::new();
    for family in Family::ALL.into_iter().filter(|f| settings.families.contains(f)) {
        let query = bank.code_vector(stay, family);
        let exclude = exclude_self.then_some(stay.stay_id.as_str());
        for r in retrieve_topk(bank, &query, settings.n_p, exclude, filter.as_ref())? {
            hits.push((family, r));
        }
    }
    Ok(Neighbours { hits })
}

/// Encoded experience rows for one stay plus where each row came from.
#[derive(Debug, Clone)]
pub struct ExperienceSet {
    pub matrix: Tensor,
    /// (family, stay id, padded) per row.
    pub provenance: Vec<(Family, String, bool)>,
}

/// Retrieve and encode the experience matrix of one stay in eval mode.
pub fn build_experience(
    stay: &PatientStay,
    bank: &ExperienceBank,
    store: &ParamStore,
    encoder: &InstructionEncoder,
    settings: &RetrievalSettings,
    exclude_self: bool,
) -> Result<ExperienceSet> {
    let found = neighbours_for(bank, stay, settings, exclude_self)?;
    let tape = Tape::inference();
    let params = store.bind_frozen(&tape);
    let seqs: Vec<&[usize]> = found.rows().map(|r| bank.entries()[r].instruction.as_slice()).collect();
    let matrix = encode_instructions(&params, encoder, &seqs)?.value();
    if !matrix.all_finite() {
        return Err(Error::NonFinite("experience matrix".into()));
    }
    let provenance = found
        .hits
        .iter()
        .map(|(f, r)| (*f, bank.entries()[r.row].stay_id.clone(), r.padded))
        .collect();
    Ok(ExperienceSet { matrix, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.5, 0.5, 0.0], &[0.0, 1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }
}
