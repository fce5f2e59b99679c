//! Synthetic corpus with a known generative structure.
//!
//! Every condition owns a block of codes in each family, two record
//! keywords and one instruction template. A stay activates 1–3 conditions;
//! its codes are clean while its record is a noisy rendering of the
//! condition keywords, so code-based neighbours carry information that the
//! record alone does not.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClinicalCode, Family, Gender, PatientStay};
use crate::error::{Error, Result};

const COMMON_WORDS: [&str; 32] = [
    "take", "your", "daily", "with", "food", "and", "water", "avoid", "rest", "the", "each", "morning",
    "evening", "keep", "check", "weight", "walk", "slowly", "follow", "diet", "low", "salt", "monitor",
    "level", "after", "meals", "before", "sleep", "twice", "stop", "if", "needed",
];
const FILLER_WORDS: [&str; 12] = [
    "patient", "noted", "admitted", "stable", "history", "of", "presented", "reports", "denies", "exam",
    "within", "limits",
];
const CLOSING: [&str; 4] = ["call", "your", "doctor", "."];
const INCIDENTAL_CODES_PER_FAMILY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_patients: usize,
    pub num_conditions: usize,
    pub codes_per_condition: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub template_len_min: usize,
    pub template_len_max: usize,
    /// Probability that a patient has a second stay.
    pub multi_stay_rate: f64,
    /// Probability that a stay carries one code unrelated to its conditions.
    pub incidental_code_rate: f64,
    /// Per-token probability that a template word of a stay's instruction is
    /// swapped for a random common word.
    pub instruction_noise_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_patients: 2000,
            num_conditions: 5,
            codes_per_condition: 2,
            noise_rate: 0.2,
            seed: 1,
            template_len_min: 8,
            template_len_max: 12,
            multi_stay_rate: 0.0,
            incidental_code_rate: 0.3,
            instruction_noise_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.num_conditions < 2 {
            return bad("num_conditions must be at least 2");
        }
        if self.num_patients < 10 {
            return bad("num_patients must be at least 10");
        }
        if self.codes_per_condition == 0 {
            return bad("codes_per_condition must be at least 1");
        }
        if !(8..=20).contains(&self.template_len_min)
            || !(8..=20).contains(&self.template_len_max)
            || self.template_len_min > self.template_len_max
        {
            return bad("template lengths must satisfy 8 <= min <= max <= 20");
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("multi_stay_rate", self.multi_stay_rate),
            ("incidental_code_rate", self.incidental_code_rate),
            ("instruction_noise_rate", self.instruction_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub keywords: [String; 2],
    pub drug: String,
    pub codes: Vec<ClinicalCode>,
    /// Ends with ".".
    pub template: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub stays: Vec<PatientStay>,
    pub conditions: Vec<ConditionSpec>,
    /// Active condition indices of each stay, ascending, parallel to `stays`.
    pub active: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    pub fn shares_condition(&self, a: usize, b: usize) -> bool {
        self.active[a].iter().any(|c| self.active[b].contains(c))
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        w.push_str(["x", "n", "l"].choose(rng).unwrap());
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn condition_specs(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ConditionSpec> {
    let mut taken: BTreeSet<String> = COMMON_WORDS.iter().chain(&FILLER_WORDS).map(|s| s.to_string()).collect();
    (0..config.num_conditions)
        .map(|c| {
            let keywords = [pseudo_word(rng, &mut taken), pseudo_word(rng, &mut taken)];
            let drug = pseudo_word(rng, &mut taken);
            let codes = Family::ALL
                .iter()
                .flat_map(|&f| {
                    (0..config.codes_per_condition).map(move |j| code_for(f, c, j))
                })
                .collect();
            let len = rng.gen_range(config.template_len_min..=config.template_len_max);
            // len − 1 body tokens followed by "."; drug and the first keyword
            // sit at random body positions.
            let mut body: Vec<String> = (0..len - 1)
                .map(|_| COMMON_WORDS.choose(rng).unwrap().to_string())
                .collect();
            let slots = index::sample(rng, len - 1, 2);
            body[slots.index(0)] = drug.clone();
            body[slots.index(1)] = keywords[0].clone();
            body.push(".".into());
            ConditionSpec {
                keywords,
                drug,
                codes,
                template: body,
            }
        })
        .collect()
}

fn code_for(family: Family, condition: usize, j: usize) -> ClinicalCode {
    let prefix = match family {
        Family::Diagnosis => "D",
        Family::Medication => "M",
        Family::Procedure => "P",
    };
    ClinicalCode::new(family, format!("{prefix}{condition:03}.{j}")).expect("generated code is valid")
}

fn incidental_code(family: Family, j: usize) -> ClinicalCode {
    code_for(family, 900, j)
}

pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let conditions = condition_specs(config, &mut rng);
    let k = config.num_conditions;

    let mut stays = Vec::new();
    let mut active_sets = Vec::new();
    for p in 0..config.num_patients {
        let patient_id = format!("P{p:05}");
        let gender = if rng.gen_bool(0.5) { Gender::Female } else { Gender::Male };
        let base_age: u32 = rng.gen_range(18..=88);
        let n_stays = if rng.gen_bool(config.multi_stay_rate) { 2 } else { 1 };
        for visit in 0..n_stays {
            let n_active = rng.gen_range(1..=3.min(k));
            let mut active: Vec<usize> = index::sample(&mut rng, k, n_active).into_vec();
            active.sort_unstable();

            let mut instruction: Vec<String> = active.iter().flat_map(|&c| conditions[c].template.clone()).collect();
            if config.instruction_noise_rate > 0.0 {
                for tok in instruction.iter_mut().filter(|t| t.as_str() != ".") {
                    if rng.gen_bool(config.instruction_noise_rate) {
                        *tok = COMMON_WORDS.choose(&mut rng).unwrap().to_string();
                    }
                }
            }
            instruction.extend(CLOSING.iter().map(|s| s.to_string()));

            let mut record = Vec::new();
            for &c in &active {
                for kw in &conditions[c].keywords {
                    if rng.gen_bool(config.noise_rate) {
                        record.push(distractor(&mut rng, &conditions, c));
                    } else {
                        record.push(kw.clone());
                    }
                    if rng.gen_bool(config.noise_rate) {
                        record.push(FILLER_WORDS.choose(&mut rng).unwrap().to_string());
                    }
                }
            }

            let mut codes: Vec<ClinicalCode> = active.iter().flat_map(|&c| conditions[c].codes.clone()).collect();
            if rng.gen_bool(config.incidental_code_rate) {
                let family = *Family::ALL.choose(&mut rng).unwrap();
                codes.push(incidental_code(family, rng.gen_range(0..INCIDENTAL_CODES_PER_FAMILY)));
            }

            stays.push(PatientStay {
                patient_id: patient_id.clone(),
                stay_id: format!("S{:06}", stays.len()),
                record_tokens: record,
                codes,
                age_years: (base_age + visit as u32).min(90),
                gender,
                instruction_tokens: instruction,
            });
            active_sets.push(active);
        }
    }
    Ok(SyntheticCorpus {
        stays,
        conditions,
        active: active_sets,
    })
}

fn distractor(rng: &mut ChaCha8Rng, conditions: &[ConditionSpec], own: usize) -> String {
    if rng.gen_bool(0.5) {
        FILLER_WORDS.choose(rng).unwrap().to_string()
    } else {
        let mut other = rng.gen_range(0..conditions.len() - 1);
        if other >= own {
            other += 1;
        }
        conditions[other].keywords[rng.gen_range(0..2)].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small(seed: u64, noise: f64) -> SyntheticCorpus {
        generate_synthetic_corpus(&SynthConfig {
            num_patients: 300,
            noise_rate: noise,
            seed,
            multi_stay_rate: 0.2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_condition_sets_give_identical_instructions() {
        let corpus = small(4, 0.3);
        let mut by_set: HashMap<&Vec<usize>, &Vec<String>> = HashMap::new();
        for (stay, active) in corpus.stays.iter().zip(&corpus.active) {
            let prev = by_set.entry(active).or_insert(&stay.instruction_tokens);
            assert_eq!(*prev, &stay.instruction_tokens);
        }
    }

    #[test]
    fn zero_noise_records_are_the_keywords() {
        let corpus = small(5, 0.0);
        for (stay, active) in corpus.stays.iter().zip(&corpus.active) {
            let expected: Vec<String> = active.iter().flat_map(|&c| corpus.conditions[c].keywords.clone()).collect();
            assert_eq!(stay.record_tokens, expected);
        }
    }

    #[test]
    fn corpus_invariants() {
        for seed in 0..5 {
            let corpus = small(seed, 0.4);
            let patients: HashSet<_> = corpus.stays.iter().map(|s| s.patient_id.clone()).collect();
            assert_eq!(patients.len(), 300);
            let stays: HashSet<_> = corpus.stays.iter().map(|s| s.stay_id.clone()).collect();
            assert_eq!(stays.len(), corpus.stays.len());
            for s in &corpus.stays {
                s.validate().unwrap();
                assert!((5..=64).contains(&s.instruction_tokens.len()));
                for f in Family::ALL {
                    assert!(s.codes_in(f).count() >= 1);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(small(9, 0.2).stays, small(9, 0.2).stays);
        assert_ne!(small(9, 0.2).stays, small(10, 0.2).stays);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SynthConfig { num_conditions: 1, ..SynthConfig::default() },
            SynthConfig { num_patients: 9, ..SynthConfig::default() },
            SynthConfig { template_len_max: 21, ..SynthConfig::default() },
            SynthConfig { noise_rate: 1.5, ..SynthConfig::default() },
        ];
        for c in bad {
            assert!(generate_synthetic_corpus(&c).is_err());
        }
    }
}
