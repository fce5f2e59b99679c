//! `pigen`: build artifacts, train, generate, evaluate and run ablations.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(pigen_core::Error),
}

impl From<pigen_core::Error> for CliError {
    fn from(e: pigen_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(pigen_core::Error::Config(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "pigen", version, about = "Retrieval- and knowledge-augmented patient instruction generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set d=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (see each command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Artifacts {
    /// Corpus JSONL.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// split.json written by build-vocab.
    #[arg(long)]
    split: Option<PathBuf>,
    /// vocab.txt written by build-vocab.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Experience bank written by build-bank.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Graph directory written by build-kg.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_p: Option<usize>,
    /// Comma-separated families to retrieve from (empty string for none).
    #[arg(long)]
    retrieve: Option<String>,
    #[arg(long)]
    reason: Option<bool>,
    #[arg(long)]
    refine: Option<bool>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct BeamFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (writes the JSONL given by --out).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        conditions: Option<usize>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        instruction_noise_rate: Option<f64>,
    },
    /// Split a corpus by patient and build the vocabulary from the train split
    /// (writes split.json and vocab.txt into --out).
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        min_freq: Option<usize>,
    },
    /// Build the experience bank from the train split (writes the file --out).
    BuildBank {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
    },
    /// Build the code co-occurrence graph from the train split (writes into
    /// the directory --out).
    BuildKg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
    },
    /// Train with early stopping (writes model.ckpt, history.csv and
    /// summary.json into --out).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Decode one split with a checkpoint (writes generation JSONL to --out).
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        role: Option<String>,
        #[command(flatten)]
        beam: BeamFlags,
    },
    /// Score generation JSONL (writes report.tsv and report.json into --out).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generations: Option<PathBuf>,
        /// Needed for stratified reports.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated strata: gender, age, disease:<code>.
        #[arg(long)]
        strata: Option<String>,
    },
    /// Train and test every ablation row for each seed (writes ablation.tsv
    /// and ablation.json into --out).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        beam: BeamFlags,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Retrain over neighbour counts (writes sweep.tsv and sweep.json into
    /// --out).
    SweepNp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        beam: BeamFlags,
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated neighbour counts.
        #[arg(long)]
        np_values: Option<String>,
    },
}

struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn put<T: Into<toml::Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        self.put(key, value.as_ref().map(|p| p.display().to_string()));
    }

    fn int(&mut self, key: &str, value: Option<usize>) {
        self.put(key, value.map(|v| v as i64));
    }

    fn list(&mut self, key: &str, value: &Option<String>, numeric: bool) -> Result<(), CliError> {
        if let Some(raw) = value {
            let items = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    if numeric {
                        s.parse::<i64>()
                            .map(toml::Value::Integer)
                            .map_err(|_| CliError::Usage(format!("--{}: {s:?} is not a number", key.replace('_', "-"))))
                    } else {
                        Ok(toml::Value::String(s.to_string()))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            self.0.push((key.to_string(), toml::Value::Array(items)));
        }
        Ok(())
    }

    fn common(&mut self, c: &Common) {
        self.put("seed", c.seed.map(|s| s as i64));
        self.path("output", &c.out);
    }

    fn artifacts(&mut self, a: &Artifacts) {
        self.path("corpus", &a.corpus);
        self.path("split", &a.split);
        self.path("vocab", &a.vocab);
        self.path("bank", &a.bank);
        self.path("graph", &a.graph);
    }

    fn model(&mut self, m: &ModelFlags) -> Result<(), CliError> {
        self.int("d", m.d);
        self.int("n_p", m.n_p);
        self.list("retrieve", &m.retrieve, false)?;
        self.put("reason", m.reason);
        self.put("refine", m.refine);
        self.put("learning_rate", m.learning_rate);
        self.int("batch_size", m.batch_size);
        self.int("max_epochs", m.max_epochs);
        self.int("patience", m.patience);
        Ok(())
    }

    fn beam(&mut self, b: &BeamFlags) {
        self.int("beam_size", b.beam_size);
        self.put("repetition_penalty", b.repetition_penalty);
        self.int("max_len", b.max_len);
    }
}

fn settings(common: &Common, flags: Overrides) -> Result<Settings, CliError> {
    // Precedence: file < typed flags < --set.
    let mut all = flags.0;
    all.extend(Settings::parse_sets(&common.sets)?);
    Settings::resolve(common.config.as_deref(), all)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut o = Overrides::new();
    match cli.command {
        Command::Synth {
            common,
            patients,
            conditions,
            noise_rate,
            instruction_noise_rate,
        } => {
            o.common(&common);
            o.int("patients", patients);
            o.int("conditions", conditions);
            o.put("noise_rate", noise_rate);
            o.put("instruction_noise_rate", instruction_noise_rate);
            commands::synth(&settings(&common, o)?)
        }
        Command::BuildVocab {
            common,
            corpus,
            min_freq,
        } => {
            o.common(&common);
            o.path("corpus", &corpus);
            o.int("min_freq", min_freq);
            commands::build_vocab(&settings(&common, o)?)
        }
        Command::BuildBank { common, artifacts } => {
            o.common(&common);
            o.artifacts(&artifacts);
            commands::build_bank(&settings(&common, o)?)
        }
        Command::BuildKg { common, artifacts } => {
            o.common(&common);
            o.artifacts(&artifacts);
            commands::build_kg(&settings(&common, o)?)
        }
        Command::Train {
            common,
            artifacts,
            model,
        } => {
            o.common(&common);
            o.artifacts(&artifacts);
            o.model(&model)?;
            commands::train(&settings(&common, o)?)
        }
        Command::Generate {
            common,
            artifacts,
            checkpoint,
            role,
            beam,
        } => {
            o.common(&common);
            o.artifacts(&artifacts);
            o.path("checkpoint", &checkpoint);
            o.put("role", role);
            o.beam(&beam);
            commands::generate(&settings(&common, o)?)
        }
        Command::Evaluate {
            common,
            generations,
            corpus,
            strata,
        } => {
            o.common(&common);
            o.path("generations", &generations);
            o.path("corpus", &corpus);
            o.list("strata", &strata, false)?;
            commands::evaluate(&settings(&common, o)?)
        }
        Command::Ablate {
            common,
            artifacts,
            model,
            beam,
            seeds,
        } => {
            o.common(&common);
            o.artifacts(&artifacts);
            o.model(&model)?;
            o.beam(&beam);
            o.list("seeds", &seeds, true)?;
            commands::ablate(&settings(&common, o)?)
        }
        Command::SweepNp {
            common,
            artifacts,
            model,
            beam,
            seeds,
            np_values,
        } => {
            o.common(&common);
            o.artifacts(&artifacts);
            o.model(&model)?;
            o.beam(&beam);
            o.list("seeds", &seeds, true)?;
            o.list("np_values", &np_values, true)?;
            commands::sweep_np(&settings(&common, o)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
