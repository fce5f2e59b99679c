//! Text overlap metrics. BLEU is corpus-level; ROUGE and METEOR average a
//! per-pair score. Every function is generic over the token type so it can
//! score both vocabulary ids and whitespace-split words.

mod report;

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub use report::{evaluate, stratified_report, EvalReport, ScoredExample, Stratification, METRIC_NAMES};

const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: f64 = 3.0;

fn check_corpus<C>(candidates: &[C], references: &[C]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::InvalidData("cannot score an empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap between candidate and reference n-grams.
fn clipped_overlap<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let reference = ngram_counts(reference, n);
    ngram_counts(candidate, n)
        .into_iter()
        .map(|(gram, c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Sufficient statistics of corpus BLEU; merging two sets of stats equals
/// scoring the concatenated corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 is unigrams.
    pub matches: Vec<u64>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<u64>,
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_len: 0,
            reference_len: 0,
        }
    }

    pub fn max_n(&self) -> usize {
        self.matches.len()
    }

    pub fn add<T: Hash + Eq>(&mut self, candidate: &[T], reference: &[T]) {
        for n in 1..=self.max_n() {
            self.matches[n - 1] += clipped_overlap(candidate, reference, n) as u64;
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1) as u64;
        }
        self.candidate_len += candidate.len() as u64;
        self.reference_len += reference.len() as u64;
    }

    pub fn merge(&mut self, other: &BleuStats) {
        assert_eq!(self.max_n(), other.max_n(), "merging BLEU stats of different orders");
        for n in 0..self.max_n() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            0.0
        } else if self.candidate_len >= self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        }
    }

    /// BLEU-n for `n` up to `max_n`. An order with no matches (or no
    /// candidate n-grams at all) makes the score 0.
    pub fn score(&self, n: usize) -> f64 {
        assert!((1..=self.max_n()).contains(&n), "BLEU order {n} not collected");
        let mut log_sum = 0.0;
        for k in 0..n {
            if self.matches[k] == 0 || self.totals[k] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[k] as f64 / self.totals[k] as f64).ln();
        }
        (self.brevity_penalty() * (log_sum / n as f64).exp()).min(1.0)
    }
}

/// Corpus BLEU-1 through BLEU-`max_n`.
pub fn bleu<T, C>(candidates: &[C], references: &[C], max_n: usize) -> Result<Vec<f64>>
where
    T: Hash + Eq,
    C: AsRef<[T]>,
{
    check_corpus(candidates, references)?;
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut stats = BleuStats::new(max_n);
    for (c, r) in candidates.iter().zip(references) {
        stats.add(c.as_ref(), r.as_ref());
    }
    Ok((1..=max_n).map(|n| stats.score(n)).collect())
}

fn f1(overlap: usize, candidate_total: usize, reference_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate_total as f64;
    let r = overlap as f64 / reference_total as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-n F1 of one pair. A pair where neither side has an n-gram of this
/// order scores 1 when the two sequences are identical and non-empty.
pub fn rouge_n_pair<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    let c_total = candidate.len().saturating_sub(n - 1);
    let r_total = reference.len().saturating_sub(n - 1);
    if c_total == 0 && r_total == 0 {
        return if !candidate.is_empty() && candidate == reference { 1.0 } else { 0.0 };
    }
    f1(clipped_overlap(candidate, reference, n), c_total, r_total)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    f1(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Mean per-pair ROUGE-n F1.
pub fn rouge_n<T, C>(candidates: &[C], references: &[C], n: usize) -> Result<f64>
where
    T: Hash + Eq,
    C: AsRef<[T]>,
{
    check_corpus(candidates, references)?;
    if n == 0 {
        return Err(Error::Config("ROUGE order must be at least 1".into()));
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_n_pair(c.as_ref(), r.as_ref(), n))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Mean per-pair LCS F1.
pub fn rouge_l<T, C>(candidates: &[C], references: &[C]) -> Result<f64>
where
    T: Eq,
    C: AsRef<[T]>,
{
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c.as_ref(), r.as_ref()))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Exact-match unigram alignment: candidate position → reference position.
///
/// Each candidate token takes the reference slot right after the previous
/// match when that continues a chunk, otherwise the earliest free slot with
/// the same token. The match count is always the maximum possible.
fn align<T: Eq>(candidate: &[T], reference: &[T]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut last: Option<usize> = None;
    candidate
        .iter()
        .map(|tok| {
            let next = last.map(|j| j + 1).filter(|&j| j < reference.len() && !used[j] && reference[j] == *tok);
            let slot = next.or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok));
            if let Some(j) = slot {
                used[j] = true;
                last = Some(j);
            }
            slot
        })
        .collect()
}

/// Number of matches and chunks of the alignment.
pub fn meteor_alignment<T: Eq>(candidate: &[T], reference: &[T]) -> (usize, usize) {
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for slot in align(candidate, reference) {
        match slot {
            Some(j) => {
                matches += 1;
                if prev.map_or(true, |p| p + 1 != j) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

pub fn meteor_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f * (1.0 - penalty)
}

/// Mean per-pair METEOR with exact matching only.
pub fn meteor_lite<T, C>(candidates: &[C], references: &[C]) -> Result<f64>
where
    T: Eq,
    C: AsRef<[T]>,
{
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_pair(c.as_ref(), r.as_ref()))
        .sum();
    Ok(total / candidates.len() as f64)
}
