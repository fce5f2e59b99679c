//! One function per subcommand. Each reads its artifacts, checks that they
//! were built from the same split and vocabulary, and writes its outputs plus
//! the resolved configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pigen_core::corpus::{
    build_vocab as build_vocabulary, generate_synthetic_corpus, load_corpus, save_corpus, split_by_patient,
    DatasetSplit, PatientStay, SplitRole, Vocabulary,
};
use pigen_core::decoding::{generate as decode, read_generations, write_generations};
use pigen_core::io::{read_string, write_atomic};
use pigen_core::knowledge::MedicalKnowledgeGraph;
use pigen_core::metrics::Stratification;
use pigen_core::model::{GenerationModel, Snapshot};
use pigen_core::retrieval::ExperienceBank;
use pigen_core::training::{
    ablation_rows, ablation_tsv, history_csv, reference_text, run_ablation_suite, score_generations, sweep_np as sweep,
    sweep_tsv, train as fit, Corpora, StopReason,
};
use pigen_core::Error;
use serde_json::json;

use crate::settings::Settings;
use crate::CliError;

type Outcome = Result<(), CliError>;

const NODES_FILE: &str = "nodes.tsv";
const ADJACENCY_FILE: &str = "adjacency.bin";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

/// Write the resolved settings next to an output and echo them to stderr.
fn record_settings(s: &Settings, output: &Path, is_dir: bool) -> Outcome {
    let path = if is_dir {
        output.join("config.toml")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".config.toml");
        output.with_file_name(name)
    };
    let text = s.to_toml();
    eprintln!("# resolved configuration ({})\n{text}", path.display());
    write_atomic(&path, text.as_bytes())?;
    Ok(())
}

fn output_dir(s: &Settings) -> Result<PathBuf, CliError> {
    let dir = s.require(&s.output, "output")?.clone();
    create_dir(&dir)?;
    record_settings(s, &dir, true)?;
    Ok(dir)
}

fn output_file(s: &Settings) -> Result<PathBuf, CliError> {
    let path = s.require(&s.output, "output")?.clone();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    record_settings(s, &path, false)?;
    Ok(path)
}

fn load_stays(s: &Settings) -> Result<Vec<PatientStay>, CliError> {
    Ok(load_corpus(s.require(&s.corpus, "corpus")?, s.max_record_len)?)
}

fn load_split(s: &Settings, stays: &[PatientStay]) -> Result<DatasetSplit, CliError> {
    let path = s.require(&s.split, "split")?;
    let split: DatasetSplit = serde_json::from_str(&read_string(path)?)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let known: HashSet<&str> = stays.iter().map(|s| s.stay_id.as_str()).collect();
    let missing = [&split.train, &split.val, &split.test]
        .into_iter()
        .flatten()
        .filter(|id| !known.contains(id.as_str()))
        .count();
    if missing > 0 {
        return Err(Error::Incompatible(format!("{missing} split ids are not in the corpus")).into());
    }
    Ok(split)
}

fn load_vocab(s: &Settings) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::from_file_string(&read_string(s.require(&s.vocab, "vocab")?)?)?)
}

fn load_graph(s: &Settings) -> Result<MedicalKnowledgeGraph, CliError> {
    let dir = s.require(&s.graph, "graph")?;
    Ok(MedicalKnowledgeGraph::load(&dir.join(NODES_FILE), &dir.join(ADJACENCY_FILE))?)
}

/// Every artifact a model needs, checked for mutual consistency.
struct Workspace {
    stays: Vec<PatientStay>,
    split: DatasetSplit,
    vocab: Vocabulary,
    bank: ExperienceBank,
    graph: MedicalKnowledgeGraph,
}

impl Workspace {
    fn load(s: &Settings) -> Result<Self, CliError> {
        let stays = load_stays(s)?;
        let split = load_split(s, &stays)?;
        let vocab = load_vocab(s)?;
        let bank = ExperienceBank::load(s.require(&s.bank, "bank")?)?;
        let graph = load_graph(s)?;
        let train = split.train_checksum();
        if bank.split_checksum != train {
            return Err(Error::Incompatible("experience bank was built from a different training split".into()).into());
        }
        if graph.split_checksum != train {
            return Err(Error::Incompatible("knowledge graph was built from a different training split".into()).into());
        }
        if bank.vocab_checksum != vocab.checksum() {
            return Err(Error::Incompatible("experience bank was built with a different vocabulary".into()).into());
        }
        Ok(Self {
            stays,
            split,
            vocab,
            bank,
            graph,
        })
    }

    fn select(&self, role: SplitRole) -> Vec<&PatientStay> {
        self.split.select(&self.stays, role)
    }
}

fn parse_role(role: &str) -> Result<SplitRole, CliError> {
    match role {
        "train" => Ok(SplitRole::Train),
        "val" => Ok(SplitRole::Val),
        "test" => Ok(SplitRole::Test),
        other => Err(CliError::Usage(format!("role must be train, val or test, got {other:?}"))),
    }
}

fn parse_strata(s: &Settings) -> Result<Vec<Stratification>, CliError> {
    Ok(s.strata.iter().map(|k| Stratification::parse(k)).collect::<Result<_, _>>()?)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn synth(s: &Settings) -> Outcome {
    let corpus = generate_synthetic_corpus(&s.synth())?;
    let out = output_file(s)?;
    save_corpus(&corpus.stays, &out)?;
    eprintln!("wrote {} stays to {}", corpus.stays.len(), out.display());
    Ok(())
}

pub fn build_vocab(s: &Settings) -> Outcome {
    let stays = load_stays(s)?;
    let split = split_by_patient(&stays, (s.train_ratio, s.val_ratio, s.test_ratio), s.seed)?;
    let vocab = build_vocabulary(&split.select(&stays, SplitRole::Train), s.min_freq)?;
    let dir = output_dir(s)?;
    write_atomic(&dir.join("split.json"), to_json(&split).as_bytes())?;
    write_atomic(&dir.join("vocab.txt"), vocab.to_file_string().as_bytes())?;
    eprintln!(
        "split {}/{}/{} stays, vocabulary of {} tokens",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(())
}

pub fn build_bank(s: &Settings) -> Outcome {
    let stays = load_stays(s)?;
    let split = load_split(s, &stays)?;
    let vocab = load_vocab(s)?;
    let train = split.select(&stays, SplitRole::Train);
    let bank = ExperienceBank::build(&train, &vocab, s.max_instruction_len, split.train_checksum())?;
    let out = output_file(s)?;
    bank.save(&out)?;
    eprintln!("bank of {} entries", bank.len());
    Ok(())
}

pub fn build_kg(s: &Settings) -> Outcome {
    let stays = load_stays(s)?;
    let split = load_split(s, &stays)?;
    let graph = MedicalKnowledgeGraph::build(&split.select(&stays, SplitRole::Train), split.train_checksum())?;
    let dir = output_dir(s)?;
    graph.save(&dir.join(NODES_FILE), &dir.join(ADJACENCY_FILE))?;
    eprintln!("graph of {} nodes", graph.len());
    Ok(())
}

pub fn train(s: &Settings) -> Outcome {
    let ws = Workspace::load(s)?;
    let config = s.train_config();
    config.validate()?;
    let dir = output_dir(s)?;
    let (train_s, val_s, test_s) = (ws.select(SplitRole::Train), ws.select(SplitRole::Val), ws.select(SplitRole::Test));
    let data = Corpora {
        train: &train_s,
        val: &val_s,
        test: &test_s,
        vocab: &ws.vocab,
        bank: &ws.bank,
        graph: &ws.graph,
    };
    let res = data.resources();
    let train_ex = data.examples(&train_s, &config)?;
    let val_ex = data.examples(&val_s, &config)?;
    let checkpoint = dir.join("model.ckpt");
    let vocab_sum = ws.vocab.checksum();
    let outcome = fit(&config, ws.vocab.len(), &res, &train_ex, &val_ex, |model, rec| {
        eprintln!("epoch {} loss {:.4} val BLEU-4 {:.4} (new best)", rec.epoch, rec.loss, rec.bleu4);
        write_atomic(&checkpoint, &model.to_checkpoint(&vocab_sum)?)
    })?;
    write_atomic(&dir.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_bleu4": outcome.best_bleu4,
        "epochs": outcome.history.len(),
        "stop": outcome.stop,
        "failure": outcome.failure,
    });
    write_atomic(&dir.join("summary.json"), to_json(&summary).as_bytes())?;
    if outcome.stop == StopReason::NonFinite {
        return Err(Error::NonFinite(outcome.failure.unwrap_or_else(|| "training".into())).into());
    }
    Ok(())
}

pub fn generate(s: &Settings) -> Outcome {
    let ws = Workspace::load(s)?;
    let beam = s.beam();
    beam.validate()?;
    let role = parse_role(&s.role)?;
    let bytes = pigen_core::io::read(s.require(&s.checkpoint, "checkpoint")?)?;
    let model = GenerationModel::from_checkpoint(&bytes, &ws.vocab.checksum())?;
    if model.graph_nodes != ws.graph.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} graph nodes, graph has {}",
            model.graph_nodes,
            ws.graph.len()
        ))
        .into());
    }
    let stays = ws.select(role);
    let mut config = s.train_config();
    config.model = model.config.clone();
    config.toggles = model.toggles.clone();
    let empty: Vec<&PatientStay> = Vec::new();
    let data = Corpora {
        train: &empty,
        val: &empty,
        test: &empty,
        vocab: &ws.vocab,
        bank: &ws.bank,
        graph: &ws.graph,
    };
    let examples = data.examples(&stays, &config)?;
    let snapshot = Snapshot::new(&model, &data.resources())?;
    let refs: Vec<_> = examples.iter().collect();
    let texts: Vec<String> = stays.iter().map(|st| reference_text(st)).collect();
    let records = decode(&snapshot, &refs, &texts, &ws.vocab, &beam)?;
    let out = output_file(s)?;
    write_generations(&records, &out)?;
    eprintln!("wrote {} generations to {}", records.len(), out.display());
    Ok(())
}

pub fn evaluate(s: &Settings) -> Outcome {
    let records = read_generations(s.require(&s.generations, "generations")?)?;
    let strata = parse_strata(s)?;
    let stays = if strata.is_empty() {
        Vec::new()
    } else {
        load_stays(s)?
    };
    let refs: Vec<&PatientStay> = stays.iter().collect();
    let report = score_generations(&records, &refs, &strata)?;
    let dir = output_dir(s)?;
    write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    eprint!("{}", report.to_tsv());
    Ok(())
}

fn with_corpora<T>(ws: &Workspace, f: impl FnOnce(&Corpora<'_>) -> Result<T, CliError>) -> Result<T, CliError> {
    let (train_s, val_s, test_s) = (ws.select(SplitRole::Train), ws.select(SplitRole::Val), ws.select(SplitRole::Test));
    f(&Corpora {
        train: &train_s,
        val: &val_s,
        test: &test_s,
        vocab: &ws.vocab,
        bank: &ws.bank,
        graph: &ws.graph,
    })
}

pub fn ablate(s: &Settings) -> Outcome {
    let ws = Workspace::load(s)?;
    let config = s.train_config();
    config.validate()?;
    let beam = s.beam();
    beam.validate()?;
    let dir = output_dir(s)?;
    let rows = with_corpora(&ws, |data| Ok(run_ablation_suite(&config, &beam, data, &ablation_rows(), &s.seeds)?))?;
    write_atomic(&dir.join("ablation.tsv"), ablation_tsv(&rows).as_bytes())?;
    write_atomic(&dir.join("ablation.json"), to_json(&rows).as_bytes())?;
    eprint!("{}", ablation_tsv(&rows));
    Ok(())
}

pub fn sweep_np(s: &Settings) -> Outcome {
    let ws = Workspace::load(s)?;
    let config = s.train_config();
    config.validate()?;
    let beam = s.beam();
    beam.validate()?;
    let dir = output_dir(s)?;
    let points = with_corpora(&ws, |data| Ok(sweep(&config, &beam, data, &s.np_values, &s.seeds)?))?;
    write_atomic(&dir.join("sweep.tsv"), sweep_tsv(&points).as_bytes())?;
    write_atomic(&dir.join("sweep.json"), to_json(&points).as_bytes())?;
    eprint!("{}", sweep_tsv(&points));
    Ok(())
}
