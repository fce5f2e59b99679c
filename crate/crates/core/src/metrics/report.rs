use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{bleu, meteor_lite, rouge_l, rouge_n};
use crate::corpus::{AgeGroup, Gender};
use crate::error::{Error, Result};

/// Column order of every report.
pub const METRIC_NAMES: [&str; 8] = [
    "METEOR", "ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4",
];

/// One generated instruction with the stay metadata used for stratification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub stay_id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub gender: Gender,
    pub age_years: u32,
    /// Diagnosis codes of the stay.
    pub diagnoses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stratification {
    Gender,
    Age,
    /// Presence or absence of one diagnosis code.
    Disease(String),
}

impl Stratification {
    /// `gender`, `age`, or `disease:<code>`.
    pub fn parse(key: &str) -> Result<Self> {
        match key {
            "gender" => Ok(Self::Gender),
            "age" => Ok(Self::Age),
            _ => match key.strip_prefix("disease:") {
                Some(code) if !code.is_empty() => Ok(Self::Disease(code.to_string())),
                _ => Err(Error::Config(format!(
                    "unknown stratum key {key:?} (expected gender, age or disease:<code>)"
                ))),
            },
        }
    }

    fn label(&self, ex: &ScoredExample) -> String {
        match self {
            Self::Gender => format!("gender={}", ex.gender.as_str()),
            Self::Age => AgeGroup::of(ex.age_years).label().to_string(),
            Self::Disease(code) if ex.diagnoses.iter().any(|c| c == code) => format!("disease={code}"),
            Self::Disease(code) => format!("disease!={code}"),
        }
    }
}

/// Scores in [0, 1] keyed by [`METRIC_NAMES`], plus optional sub-reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Only strata that contain at least one example appear.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub strata: BTreeMap<String, EvalReport>,
}

/// All metrics over a corpus of token sequences.
pub fn evaluate<C: AsRef<[String]>>(candidates: &[C], references: &[C]) -> Result<EvalReport> {
    let b = bleu(candidates, references, 4)?;
    let values = [
        meteor_lite(candidates, references)?,
        rouge_n(candidates, references, 1)?,
        rouge_n(candidates, references, 2)?,
        rouge_l(candidates, references)?,
        b[0],
        b[1],
        b[2],
        b[3],
    ];
    Ok(EvalReport {
        count: candidates.len(),
        metrics: METRIC_NAMES.iter().map(|n| n.to_string()).zip(values).collect(),
        strata: BTreeMap::new(),
    })
}

fn evaluate_examples(examples: &[&ScoredExample]) -> Result<EvalReport> {
    let c: Vec<&[String]> = examples.iter().map(|e| e.candidate.as_slice()).collect();
    let r: Vec<&[String]> = examples.iter().map(|e| e.reference.as_slice()).collect();
    evaluate(&c, &r)
}

/// Overall metrics plus one sub-report per non-empty stratum of each key.
pub fn stratified_report(results: &[ScoredExample], strata: &[Stratification]) -> Result<EvalReport> {
    let all: Vec<&ScoredExample> = results.iter().collect();
    let mut report = evaluate_examples(&all)?;
    for key in strata {
        let mut groups: BTreeMap<String, Vec<&ScoredExample>> = BTreeMap::new();
        for ex in results {
            groups.entry(key.label(ex)).or_default().push(ex);
        }
        for (label, members) in groups {
            report.strata.insert(label, evaluate_examples(&members)?);
        }
    }
    Ok(report)
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Tab-separated table: one row for the whole set, then one per stratum.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("subset\tcount\t{}\n", METRIC_NAMES.join("\t"));
        let mut row = |name: &str, r: &EvalReport| {
            let _ = write!(out, "{name}\t{}", r.count);
            for m in METRIC_NAMES {
                let _ = write!(out, "\t{:.6}", r.metric(m).unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        row("all", self);
        for (name, sub) in &self.strata {
            row(name, sub);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
