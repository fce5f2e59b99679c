use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PatientStay;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Patient-disjoint train/val/test partition of stay ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn roles(&self) -> HashMap<&str, SplitRole> {
        let mut m = HashMap::new();
        for (ids, role) in [(&self.train, SplitRole::Train), (&self.val, SplitRole::Val), (&self.test, SplitRole::Test)] {
            for id in ids {
                m.insert(id.as_str(), role);
            }
        }
        m
    }

    pub fn ids(&self, role: SplitRole) -> &[String] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Test => &self.test,
        }
    }

    /// Stays of `role`, in corpus order.
    pub fn select<'a>(&self, stays: &'a [PatientStay], role: SplitRole) -> Vec<&'a PatientStay> {
        let roles = self.roles();
        stays
            .iter()
            .filter(|s| roles.get(s.stay_id.as_str()) == Some(&role))
            .collect()
    }

    /// Identifies the exact training set; artifacts built from it record this.
    pub fn train_checksum(&self) -> String {
        sha256_hex(self.train.join("\n").as_bytes())
    }
}

/// Partition unique patients (shuffled by `seed`) by `ratios`, keeping every
/// stay of a patient in that patient's split. Counts are floored and the
/// remainder goes to the largest fractional parts.
pub fn split_by_patient(stays: &[PatientStay], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut patients: Vec<&str> = stays
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = patients.len();
    if n < 3 {
        return Err(Error::InsufficientCorpus(format!("{n} patients; need at least 3 to split")));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = split_counts(n, r);

    let mut role_of: HashMap<&str, SplitRole> = HashMap::new();
    let roles = [SplitRole::Train, SplitRole::Val, SplitRole::Test];
    let mut cursor = 0;
    for (role, &count) in roles.iter().zip(&counts) {
        for p in &patients[cursor..cursor + count] {
            role_of.insert(p, *role);
        }
        cursor += count;
    }
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        seed,
    };
    for s in stays {
        let ids = match role_of[s.patient_id.as_str()] {
            SplitRole::Train => &mut split.train,
            SplitRole::Val => &mut split.val,
            SplitRole::Test => &mut split.test,
        };
        ids.push(s.stay_id.clone());
    }
    Ok(split)
}

fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remainder = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        counts[i] += 1;
        remainder -= 1;
    }
    // Every split with a positive ratio gets at least one patient.
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let largest = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            if counts[largest] > 1 {
                counts[largest] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}
