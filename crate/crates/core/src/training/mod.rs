//! Optimization: Adam with global-norm clipping, teacher-forced epochs,
//! greedy validation with BLEU-4 early stopping, and experiment runners.

mod experiment;

use pigen_numerics::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{greedy, SnapshotDecoder};
use crate::error::{Error, Result};
use crate::metrics::BleuStats;
use crate::model::{DropoutPlan, Example, GenerationModel, ModelConfig, Resources, Snapshot, Toggles};

pub use experiment::{
    ablation_rows, ablation_tsv, mean_gates, reference_text, run_ablation_suite, run_experiment, score_generations,
    sweep_np, sweep_tsv, AblationRow, Corpora, ExperimentResult, RowResult, SeedResult, SweepPoint,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Drives shuffling and dropout; parameter init uses `model.init_seed`.
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            toggles: Toggles::full(),
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 150,
            patience: 5,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, max epochs and patience must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// Adam moments for every tensor of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()).expect("shape of an existing tensor"))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::DimensionMismatch {
            left: grads.len(),
            right: store.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != store.tensors()[i].shape() {
            return Err(Error::InvalidData(format!(
                "gradient shape {:?} does not match parameter {}",
                g.shape(),
                store.iter().nth(i).map(|(_, n, _)| n).unwrap_or("?")
            )));
        }
        if !g.all_finite() {
            let name = store.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default();
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Stop after `patience` consecutive evaluations without a strict
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Record a score; returns (is new best, should stop).
    pub fn observe(&mut self, score: f64) -> (bool, bool) {
        let improved = self.best.map_or(true, |b| score > b);
        if improved {
            self.best = Some(score);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bleu4: f64,
    pub is_best: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,bleu4,is_best\n");
    for r in history {
        out.push_str(&format!("{},{:.10},{:.10},{}\n", r.epoch, r.loss, r.bleu4, r.is_best));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A non-finite loss or gradient; the best model so far is kept.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: GenerationModel,
    pub best_epoch: usize,
    pub best_bleu4: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Description of the numerical failure when `stop` is `NonFinite`.
    pub failure: Option<String>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Greedy-decode `examples` and score the outputs against their references
/// with corpus BLEU-4 over token ids.
pub fn greedy_bleu4(model: &GenerationModel, res: &Resources<'_>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidData("no examples to validate on".into()));
    }
    let snapshot = Snapshot::new(model, res)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = snapshot.prepare(&refs)?;
    let decoder = SnapshotDecoder {
        snapshot: &snapshot,
        batch: &batch,
    };
    let ids: Vec<usize> = (0..examples.len()).collect();
    let decoded = greedy(&decoder, &ids, model.config.max_instruction_len, 1.0)?;
    let mut stats = BleuStats::new(4);
    for (d, ex) in decoded.iter().zip(examples) {
        stats.add(&d.tokens, ex.reference());
    }
    Ok(stats.score(4))
}

/// Mean teacher-forced loss of one pass over `examples` in batches.
fn run_epoch(
    model: &mut GenerationModel,
    adam: &mut AdamState,
    config: &TrainConfig,
    res: &Resources<'_>,
    examples: &[Example],
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let dropout = DropoutPlan::new(model.config.dropout, mix(config.seed, epoch as u64, b as u64 + 1), true);
        let tape = Tape::new();
        let params = model.store.bind(&tape);
        let loss = model.forward_loss(&params, &batch, res, &dropout)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
        }
        let grads = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        drop(params);
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(&mut model.store, &grads, adam, config.learning_rate)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Train from a fresh model with the given vocabulary and graph sizes.
/// Validation after every epoch decides both the kept checkpoint and when to
/// stop. `on_best` sees every new best model (for persisting checkpoints).
pub fn train(
    config: &TrainConfig,
    vocab_size: usize,
    res: &Resources<'_>,
    train_examples: &[Example],
    val_examples: &[Example],
    mut on_best: impl FnMut(&GenerationModel, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_examples.is_empty() || val_examples.is_empty() {
        return Err(Error::InsufficientCorpus("training needs train and validation examples".into()));
    }
    let mut model = GenerationModel::new(config.model.clone(), config.toggles.clone(), vocab_size, res.graph.len())?;
    let mut adam = AdamState::new(&model.store);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best: Option<(GenerationModel, usize, f64)> = None;
    let mut stop = StopReason::MaxEpochs;
    let mut failure = None;
    for epoch in 1..=config.max_epochs {
        let step = run_epoch(&mut model, &mut adam, config, res, train_examples, epoch)
            .and_then(|loss| Ok((loss, greedy_bleu4(&model, res, val_examples)?)));
        let (loss, bleu4) = match step {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                stop = StopReason::NonFinite;
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let (is_best, done) = stopper.observe(bleu4);
        let record = EpochRecord {
            epoch,
            loss,
            bleu4,
            is_best,
        };
        if is_best {
            on_best(&model, &record)?;
            best = Some((model.clone(), epoch, bleu4));
        }
        history.push(record);
        if done {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best, best_epoch, best_bleu4) = match best {
        Some(b) => b,
        None => {
            return Err(Error::NonFinite(
                failure.unwrap_or_else(|| "training diverged before the first validation".into()),
            ))
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_bleu4,
        history,
        stop,
        failure,
    })
}
