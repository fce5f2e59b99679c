//! Flat experiment configuration: defaults, then the config file, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use pigen_core::corpus::{Family, SynthConfig};
use pigen_core::decoding::{BeamConfig, LengthMode};
use pigen_core::model::{ModelConfig, Toggles};
use pigen_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    /// Directory holding `nodes.tsv` and `adjacency.bin`.
    pub graph: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub output: Option<PathBuf>,

    pub seed: u64,

    pub patients: usize,
    pub conditions: usize,
    pub codes_per_condition: usize,
    pub noise_rate: f64,
    pub instruction_noise_rate: f64,
    pub incidental_code_rate: f64,
    pub multi_stay_rate: f64,
    pub template_len_min: usize,
    pub template_len_max: usize,

    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub min_freq: usize,
    pub max_record_len: usize,
    pub max_instruction_len: usize,

    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub n_p: usize,
    pub demographic_filter: bool,
    pub retrieve: Vec<Family>,
    pub reason: bool,
    pub refine: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,

    pub beam_size: usize,
    pub repetition_penalty: f64,
    pub max_len: usize,
    pub length_mode: LengthMode,

    /// Split decoded by `generate`: train, val or test.
    pub role: String,
    pub seeds: Vec<u64>,
    pub np_values: Vec<usize>,
    /// `gender`, `age` or `disease:<code>`.
    pub strata: Vec<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let beam = BeamConfig::default();
        Self {
            corpus: None,
            split: None,
            vocab: None,
            bank: None,
            graph: None,
            checkpoint: None,
            generations: None,
            output: None,
            seed: 0,
            patients: synth.num_patients,
            conditions: synth.num_conditions,
            codes_per_condition: synth.codes_per_condition,
            noise_rate: synth.noise_rate,
            instruction_noise_rate: synth.instruction_noise_rate,
            incidental_code_rate: synth.incidental_code_rate,
            multi_stay_rate: synth.multi_stay_rate,
            template_len_min: synth.template_len_min,
            template_len_max: synth.template_len_max,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            min_freq: 20,
            max_record_len: model.max_record_len,
            max_instruction_len: model.max_instruction_len,
            d: model.d,
            heads: model.heads,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            gcn_layers: model.gcn_layers,
            dropout: model.dropout,
            n_p: model.n_p,
            demographic_filter: model.demographic_filter,
            retrieve: Family::ALL.to_vec(),
            reason: true,
            refine: true,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            clip_norm: train.clip_norm,
            beam_size: beam.beam_size,
            repetition_penalty: beam.repetition_penalty,
            max_len: beam.max_len,
            length_mode: beam.length_mode,
            role: "test".into(),
            seeds: vec![0, 1, 2],
            np_values: vec![5, 10, 20, 30, 50],
            strata: Vec::new(),
        }
    }
}

/// Parse a `--set` value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl Settings {
    /// Merge the optional config file with `overrides` (key, value) pairs.
    pub fn resolve(file: Option<&Path>, overrides: Vec<(String, toml::Value)>) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k, v);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("configuration: {}", e.message())))
    }

    /// `key=value` strings from `--set`.
    pub fn parse_sets(sets: &[String]) -> Result<Vec<(String, toml::Value)>, CliError> {
        sets.iter()
            .map(|s| {
                let (k, v) = s
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
                Ok((k.trim().to_string(), parse_value(v.trim())))
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_patients: self.patients,
            num_conditions: self.conditions,
            codes_per_condition: self.codes_per_condition,
            noise_rate: self.noise_rate,
            seed: self.seed,
            template_len_min: self.template_len_min,
            template_len_max: self.template_len_max,
            multi_stay_rate: self.multi_stay_rate,
            incidental_code_rate: self.incidental_code_rate,
            instruction_noise_rate: self.instruction_noise_rate,
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            retrieve: self.retrieve.clone(),
            reason: self.reason,
            refine: self.refine,
        }
        .normalized()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: self.d,
                heads: self.heads,
                encoder_layers: self.encoder_layers,
                decoder_layers: self.decoder_layers,
                gcn_layers: self.gcn_layers,
                dropout: self.dropout,
                n_p: self.n_p,
                demographic_filter: self.demographic_filter,
                max_record_len: self.max_record_len,
                max_instruction_len: self.max_instruction_len,
                init_seed: self.seed,
            },
            toggles: self.toggles(),
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            clip_norm: self.clip_norm,
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            repetition_penalty: self.repetition_penalty,
            max_len: self.max_len,
            length_mode: self.length_mode,
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("missing {key}: pass --{} or set `{key}` in the config", key.replace('_', "-"))))
    }
}
