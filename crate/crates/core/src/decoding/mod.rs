//! Autoregressive generation: greedy and beam search with a repetition
//! penalty, over any model that can extend a batch of decoding states by
//! one token.

mod output;

use std::cmp::Ordering;
use std::collections::BTreeSet;

use pigen_numerics::kernels;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderState, PreparedBatch, Snapshot};

pub use output::{generate, read_generations, write_generations, GenerationRecord};

/// How finished hypotheses are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    /// Total log-probability.
    #[default]
    Raw,
    /// Log-probability per generated token, EOS included.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub repetition_penalty: f64,
    /// Generated tokens including EOS.
    pub max_len: usize,
    pub length_mode: LengthMode,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 2,
            repetition_penalty: 2.5,
            max_len: 64,
            length_mode: LengthMode::Raw,
        }
    }
}

impl BeamConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam_size: 1,
            repetition_penalty: 1.0,
            max_len,
            length_mode: LengthMode::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return Err(Error::Config(format!(
                "repetition penalty {} must be a finite value >= 1",
                self.repetition_penalty
            )));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shrink logits of already generated ids: positive ones are divided by
/// `theta`, the rest multiplied. Each distinct id is penalized once.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[usize], theta: f64) {
    if theta == 1.0 {
        return;
    }
    let seen: BTreeSet<usize> = generated.iter().copied().collect();
    for id in seen {
        if let Some(l) = logits.get_mut(id) {
            *l = if *l > 0.0 { *l / theta } else { *l * theta };
        }
    }
}

/// A model that decodes token by token from per-hypothesis states.
pub trait StepModel: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Fresh state for input `example`, before BOS has been fed.
    fn start(&self, example: usize) -> Self::State;

    /// Feed one token to each state; returns `states.len() × vocab_size`
    /// logits for the next position.
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<f64>>;
}

/// A frozen model with its prepared inputs.
pub struct SnapshotDecoder<'a, 'm> {
    pub snapshot: &'a Snapshot<'m>,
    pub batch: &'a PreparedBatch,
}

impl StepModel for SnapshotDecoder<'_, '_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.snapshot.model().vocab_size
    }

    fn start(&self, example: usize) -> DecoderState {
        self.snapshot.start(example)
    }

    fn step(&self, states: &mut [DecoderState], tokens: &[usize]) -> Result<Vec<f64>> {
        self.snapshot.step(self.batch, states, tokens)
    }
}

/// Result of decoding one input.
#[derive(Debug, Clone)]
pub struct Decoded<S> {
    /// Generated ids without the final EOS.
    pub tokens: Vec<usize>,
    /// Total log-probability of `tokens` (plus EOS when finished).
    pub score: f64,
    pub finished: bool,
    /// State after the last fed token.
    pub state: S,
}

/// Log-probabilities of the next token for one hypothesis: PAD and BOS are
/// never emitted and the penalty sees the hypothesis's own history.
fn next_log_probs(logits: &mut [f64], history: &[usize], theta: f64) -> Result<()> {
    logits[PAD] = f64::NEG_INFINITY;
    logits[BOS] = f64::NEG_INFINITY;
    apply_repetition_penalty(logits, history, theta);
    kernels::log_softmax_in_place(logits);
    if logits.iter().any(|l| l.is_nan()) || !logits.iter().any(|l| l.is_finite()) {
        return Err(Error::NonFinite("next-token distribution".into()));
    }
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of many inputs in one batch of states.
pub fn greedy<M: StepModel>(model: &M, examples: &[usize], max_len: usize, theta: f64) -> Result<Vec<Decoded<M::State>>> {
    let v = model.vocab_size();
    let mut out: Vec<Decoded<M::State>> = examples
        .iter()
        .map(|&e| Decoded {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
            state: model.start(e),
        })
        .collect();
    let mut alive: Vec<usize> = (0..out.len()).collect();
    let mut feed: Vec<usize> = vec![BOS; out.len()];
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let mut states: Vec<M::State> = alive.iter().map(|&i| out[i].state.clone()).collect();
        let tokens: Vec<usize> = alive.iter().map(|&i| feed[i]).collect();
        let mut logits = model.step(&mut states, &tokens)?;
        let mut still = Vec::with_capacity(alive.len());
        for (k, (&i, state)) in alive.iter().zip(states).enumerate() {
            let row = &mut logits[k * v..(k + 1) * v];
            next_log_probs(row, &out[i].tokens, theta)?;
            let t = argmax(row);
            let d = &mut out[i];
            d.state = state;
            d.score += row[t];
            if t == EOS {
                d.finished = true;
            } else {
                d.tokens.push(t);
                feed[i] = t;
                still.push(i);
            }
        }
        alive = still;
    }
    Ok(out)
}

struct Hypothesis<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

struct Finished<S> {
    tokens: Vec<usize>,
    score: f64,
    step: usize,
    state: S,
}

fn ranking(score: f64, len: usize, mode: LengthMode) -> f64 {
    match mode {
        LengthMode::Raw => score,
        LengthMode::Average => score / len.max(1) as f64,
    }
}

/// Beam search for one input. Each step keeps the `beam_size` best
/// extensions of the live hypotheses; extensions ending in EOS leave the
/// beam as finished. The best finished hypothesis wins (ties: earlier
/// finishing step, then smaller token sequence); if none finished within
/// `max_len`, the best live one is returned.
pub fn beam_search<M: StepModel>(model: &M, example: usize, config: &BeamConfig) -> Result<Decoded<M::State>> {
    config.validate()?;
    let v = model.vocab_size();
    let k = config.beam_size;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.start(example),
    }];
    let mut finished: Vec<Finished<M::State>> = Vec::new();
    for step in 0..config.max_len {
        let mut states: Vec<M::State> = alive.iter().map(|h| h.state.clone()).collect();
        let tokens: Vec<usize> = alive.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let mut logits = model.step(&mut states, &tokens)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * v);
        for (h, hyp) in alive.iter().enumerate() {
            let row = &mut logits[h * v..(h + 1) * v];
            next_log_probs(row, &hyp.tokens, config.repetition_penalty)?;
            for (t, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    candidates.push((hyp.score + lp, h, t));
                }
            }
        }
        let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| alive[a.1].tokens.cmp(&alive[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        };
        if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, order);
            candidates.truncate(k);
        }
        candidates.sort_by(order);
        let mut next = Vec::with_capacity(k);
        for (score, h, t) in candidates {
            let mut tokens = alive[h].tokens.clone();
            if t == EOS {
                finished.push(Finished {
                    tokens,
                    score,
                    step,
                    state: states[h].clone(),
                });
            } else {
                tokens.push(t);
                next.push(Hypothesis {
                    tokens,
                    score,
                    state: states[h].clone(),
                });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if config.length_mode == LengthMode::Raw {
            // Scores only fall as hypotheses grow.
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if finished.iter().any(|f| f.score >= best_alive) {
                break;
            }
        }
    }
    let mode = config.length_mode;
    let best = finished.into_iter().min_by(|a, b| {
        let (ra, rb) = (ranking(a.score, a.tokens.len() + 1, mode), ranking(b.score, b.tokens.len() + 1, mode));
        rb.total_cmp(&ra).then(a.step.cmp(&b.step)).then_with(|| a.tokens.cmp(&b.tokens))
    });
    if let Some(f) = best {
        return Ok(Decoded {
            tokens: f.tokens,
            score: f.score,
            finished: true,
            state: f.state,
        });
    }
    let h = alive
        .into_iter()
        .min_by(|a, b| {
            let (ra, rb) = (ranking(a.score, a.tokens.len(), mode), ranking(b.score, b.tokens.len(), mode));
            rb.total_cmp(&ra).then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("beam keeps at least one hypothesis");
    Ok(Decoded {
        tokens: h.tokens,
        score: h.score,
        finished: false,
        state: h.state,
    })
}

/// Decode every input: one batched greedy pass when the beam is trivial,
/// otherwise independent beam searches fanned out over threads. Results are
/// in input order.
pub fn decode_all<M: StepModel>(model: &M, examples: &[usize], config: &BeamConfig) -> Result<Vec<Decoded<M::State>>> {
    config.validate()?;
    if config.beam_size == 1 && config.length_mode == LengthMode::Raw {
        return greedy(model, examples, config.max_len, config.repetition_penalty);
    }
    examples.par_iter().map(|&e| beam_search(model, e, config)).collect()
}
