use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_tokens, ClinicalCode, Family, Gender, PatientStay, Vocabulary};
use crate::error::{Error, Result};
use crate::io;
use crate::retrieval::CodeVector;

const MAGIC: &[u8] = b"PIGBANK1\n";

/// Code vocabulary and row-major code vectors of one family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyIndex {
    pub family: Family,
    codes: Vec<String>,
    column: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl FamilyIndex {
    fn new(family: Family, codes: Vec<String>, vectors: Vec<f64>) -> Self {
        let column = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            family,
            codes,
            column,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors[row * d..(row + 1) * d]
    }

    /// Average of one-hots over the known codes; unseen codes are ignored.
    pub fn encode<'a>(&self, codes: impl Iterator<Item = &'a ClinicalCode>) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        let cols: BTreeSet<usize> = codes
            .filter(|c| c.family == self.family)
            .filter_map(|c| self.column.get(&c.code).copied())
            .collect();
        for &c in &cols {
            v[c] = 1.0 / cols.len() as f64;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub stay_id: String,
    /// Instruction token ids, no BOS/EOS.
    pub instruction: Vec<usize>,
    pub gender: Gender,
    pub age_years: u32,
}

/// Immutable index over training stays.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBank {
    families: [FamilyIndex; 3],
    entries: Vec<BankEntry>,
    pub vocab_checksum: String,
    pub split_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    families: Vec<(Family, Vec<String>)>,
    entries: Vec<BankEntry>,
    vocab_checksum: String,
    split_checksum: String,
    payload_checksum: String,
}

impl ExperienceBank {
    pub fn build(
        train: &[&PatientStay],
        vocab: &Vocabulary,
        max_instruction_len: usize,
        split_checksum: impl Into<String>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyBank("no training stays".into()));
        }
        let families = Family::ALL.map(|family| {
            let codes: Vec<String> = train
                .iter()
                .flat_map(|s| s.codes_in(family).map(|c| c.code.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut index = FamilyIndex::new(family, codes, Vec::new());
            let vectors = train.iter().flat_map(|s| index.encode(s.codes.iter())).collect();
            index.vectors = vectors;
            index
        });
        let entries = train
            .iter()
            .map(|s| BankEntry {
                stay_id: s.stay_id.clone(),
                instruction: encode_tokens(&s.instruction_tokens, vocab, max_instruction_len),
                gender: s.gender,
                age_years: s.age_years,
            })
            .collect();
        Ok(Self {
            families,
            entries,
            vocab_checksum: vocab.checksum(),
            split_checksum: split_checksum.into(),
        })
    }

    /// A bank from explicit per-family vectors; used by tests and oracles.
    pub fn from_parts(entries: Vec<BankEntry>, families: [(Vec<String>, Vec<Vec<f64>>); 3]) -> Result<Self> {
        let mut built = Vec::new();
        for (family, (codes, rows)) in Family::ALL.into_iter().zip(families) {
            if rows.len() != entries.len() || rows.iter().any(|r| r.len() != codes.len()) {
                return Err(Error::InvalidData(format!("{family} vectors do not match bank shape")));
            }
            built.push(FamilyIndex::new(family, codes, rows.concat()));
        }
        Ok(Self {
            families: built.try_into().expect("three families"),
            entries,
            vocab_checksum: String::new(),
            split_checksum: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn family(&self, family: Family) -> &FamilyIndex {
        &self.families[family.index()]
    }

    pub fn code_vector(&self, stay: &PatientStay, family: Family) -> CodeVector {
        CodeVector {
            family,
            values: self.family(family).encode(stay.codes.iter()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for f in &self.families {
            io::f64s_to_bytes(&f.vectors, &mut payload);
        }
        let header = Header {
            families: self.families.iter().map(|f| (f.family, f.codes.clone())).collect(),
            entries: self.entries.clone(),
            vocab_checksum: self.vocab_checksum.clone(),
            split_checksum: self.split_checksum.clone(),
            payload_checksum: io::sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&header).expect("bank header serializes");
        io::frame(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::split_framed(bytes, MAGIC, "experience bank")?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| Error::Incompatible(format!("experience bank header: {e}")))?;
        if io::sha256_hex(payload) != header.payload_checksum {
            return Err(Error::Incompatible("experience bank checksum mismatch".into()));
        }
        let values = io::bytes_to_f64s(payload);
        let rows = header.entries.len();
        let mut offset = 0;
        let mut families = Vec::new();
        for (expected, (family, codes)) in Family::ALL.into_iter().zip(header.families) {
            if family != expected {
                return Err(Error::Incompatible("experience bank family order".into()));
            }
            let n = rows * codes.len();
            let vectors = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Incompatible("experience bank payload truncated".into()))?
                .to_vec();
            offset += n;
            families.push(FamilyIndex::new(family, codes, vectors));
        }
        if offset != values.len() || families.len() != 3 {
            return Err(Error::Incompatible("experience bank payload size".into()));
        }
        Ok(Self {
            families: families.try_into().expect("three families"),
            entries: header.entries,
            vocab_checksum: header.vocab_checksum,
            split_checksum: header.split_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?)
    }
}
