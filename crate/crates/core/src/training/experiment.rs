use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use super::{train, TrainConfig, TrainOutcome};
use crate::corpus::{detokenize, Family, PatientStay, Vocabulary};
use crate::decoding::{generate, BeamConfig, GenerationRecord};
use crate::error::{Error, Result};
use crate::knowledge::MedicalKnowledgeGraph;
use crate::metrics::{evaluate, stratified_report, EvalReport, ScoredExample, Stratification, METRIC_NAMES};
use crate::model::{make_examples, Example, Resources, Snapshot, Toggles};
use crate::retrieval::ExperienceBank;

/// Split stays plus the artifacts built from the training split.
#[derive(Clone, Copy)]
pub struct Corpora<'a> {
    pub train: &'a [&'a PatientStay],
    pub val: &'a [&'a PatientStay],
    pub test: &'a [&'a PatientStay],
    pub vocab: &'a Vocabulary,
    pub bank: &'a ExperienceBank,
    pub graph: &'a MedicalKnowledgeGraph,
}

impl<'a> Corpora<'a> {
    pub fn resources(&self) -> Resources<'a> {
        Resources {
            bank: self.bank,
            graph: self.graph,
        }
    }

    pub fn examples(&self, stays: &[&PatientStay], config: &TrainConfig) -> Result<Vec<Example>> {
        make_examples(stays, self.vocab, self.bank, &config.model, &config.toggles, true)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub generations: Vec<GenerationRecord>,
    /// Test-split metrics of the best checkpoint.
    pub report: EvalReport,
    pub gate_means: [Option<f64>; 2],
}

pub fn reference_text(stay: &PatientStay) -> String {
    detokenize(&stay.instruction_tokens)
}

/// Metrics of generation records; strata need each record's stay.
pub fn score_generations(
    records: &[GenerationRecord],
    stays: &[&PatientStay],
    strata: &[Stratification],
) -> Result<EvalReport> {
    let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    if strata.is_empty() {
        let c: Vec<Vec<String>> = records.iter().map(|r| split(&r.generated)).collect();
        let r: Vec<Vec<String>> = records.iter().map(|r| split(&r.reference)).collect();
        return evaluate(&c, &r);
    }
    let by_id: HashMap<&str, &PatientStay> = stays.iter().map(|s| (s.stay_id.as_str(), *s)).collect();
    let scored = records
        .iter()
        .map(|r| {
            let stay = by_id
                .get(r.stay_id.as_str())
                .ok_or_else(|| Error::InvalidData(format!("generation for unknown stay {}", r.stay_id)))?;
            Ok(ScoredExample {
                stay_id: r.stay_id.clone(),
                candidate: split(&r.generated),
                reference: split(&r.reference),
                gender: stay.gender,
                age_years: stay.age_years,
                diagnoses: stay.codes_in(Family::Diagnosis).map(|c| c.code.clone()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stratified_report(&scored, strata)
}

/// Mean of the per-record gate means over records that have them.
pub fn mean_gates(records: &[GenerationRecord]) -> [Option<f64>; 2] {
    let mut out = [None, None];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.gate_means[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

/// Train, then beam-decode and score the test split with the best model.
pub fn run_experiment(
    config: &TrainConfig,
    beam: &BeamConfig,
    data: &Corpora<'_>,
    strata: &[Stratification],
) -> Result<ExperimentResult> {
    beam.validate()?;
    let res = data.resources();
    let train_ex = data.examples(data.train, config)?;
    let val_ex = data.examples(data.val, config)?;
    let test_ex = data.examples(data.test, config)?;
    let outcome = train(config, data.vocab.len(), &res, &train_ex, &val_ex, |_, _| Ok(()))?;
    let snapshot = Snapshot::new(&outcome.best, &res)?;
    let refs: Vec<&Example> = test_ex.iter().collect();
    let texts: Vec<String> = data.test.iter().map(|s| reference_text(s)).collect();
    let generations = generate(&snapshot, &refs, &texts, data.vocab, beam)?;
    let report = score_generations(&generations, data.test, strata)?;
    Ok(ExperimentResult {
        gate_means: mean_gates(&generations),
        outcome,
        generations,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
}

/// Baseline, single-family retrieval (a)–(c), all families (d), knowledge
/// only (e), both without gates (f), and the full gated model.
pub fn ablation_rows() -> Vec<AblationRow> {
    let row = |name: &str, retrieve: &[Family], reason: bool, refine: bool| AblationRow {
        name: name.to_string(),
        toggles: Toggles {
            retrieve: retrieve.to_vec(),
            reason,
            refine,
        },
    };
    vec![
        row("Baseline", &[], false, false),
        row("(a)", &[Family::Diagnosis], false, false),
        row("(b)", &[Family::Medication], false, false),
        row("(c)", &[Family::Procedure], false, false),
        row("(d)", &Family::ALL, false, false),
        row("(e)", &[], true, false),
        row("(f)", &Family::ALL, true, false),
        row("Full Model", &Family::ALL, true, true),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: EvalReport,
    pub gate_means: [Option<f64>; 2],
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub seeds: Vec<SeedResult>,
    /// Mean of each metric over seeds.
    pub mean: BTreeMap<String, f64>,
}

impl RowResult {
    pub fn mean_metric(&self, name: &str) -> f64 {
        self.mean.get(name).copied().unwrap_or(f64::NAN)
    }
}

fn run_row(config: &TrainConfig, beam: &BeamConfig, data: &Corpora<'_>, row: &AblationRow, seeds: &[u64]) -> Result<RowResult> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = config.clone();
        c.toggles = row.toggles.clone();
        c.seed = seed;
        c.model.init_seed = seed;
        let r = run_experiment(&c, beam, data, &[])?;
        results.push(SeedResult {
            seed,
            report: r.report,
            gate_means: r.gate_means,
            best_epoch: r.outcome.best_epoch,
        });
    }
    let mean = METRIC_NAMES
        .iter()
        .map(|m| {
            let total: f64 = results.iter().map(|s| s.report.metric(m).unwrap_or(0.0)).sum();
            (m.to_string(), total / results.len() as f64)
        })
        .collect();
    Ok(RowResult {
        row: row.clone(),
        seeds: results,
        mean,
    })
}

/// Train and test every row once per seed. The seed sets both parameter
/// initialization and data order.
pub fn run_ablation_suite(
    config: &TrainConfig,
    beam: &BeamConfig,
    data: &Corpora<'_>,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<Vec<RowResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    rows.iter().map(|row| run_row(config, beam, data, row, seeds)).collect()
}

fn gate_cell(g: Option<f64>) -> String {
    g.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn metric_cells(out: &mut String, values: impl Iterator<Item = f64>) {
    for v in values {
        let _ = write!(out, "\t{v:.6}");
    }
}

pub fn ablation_tsv(results: &[RowResult]) -> String {
    let mut out = format!(
        "setting\tdiagnosis\tmedication\tprocedure\treason\trefine\tseed\t{}\tgate_experience\tgate_knowledge\n",
        METRIC_NAMES.join("\t")
    );
    for r in results {
        let t = &r.row.toggles;
        let mark = |b: bool| if b { "x" } else { "" };
        let prefix = format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.row.name,
            mark(t.retrieve.contains(&Family::Diagnosis)),
            mark(t.retrieve.contains(&Family::Medication)),
            mark(t.retrieve.contains(&Family::Procedure)),
            mark(t.reason),
            mark(t.refine)
        );
        for s in &r.seeds {
            let _ = write!(out, "{prefix}\t{}", s.seed);
            metric_cells(&mut out, METRIC_NAMES.iter().map(|m| s.report.metric(m).unwrap_or(f64::NAN)));
            let _ = writeln!(out, "\t{}\t{}", gate_cell(s.gate_means[0]), gate_cell(s.gate_means[1]));
        }
        let _ = write!(out, "{prefix}\tmean");
        metric_cells(&mut out, METRIC_NAMES.iter().map(|m| r.mean_metric(m)));
        let gates: Vec<[Option<f64>; 2]> = r.seeds.iter().map(|s| s.gate_means).collect();
        let avg = |k: usize| {
            let v: Vec<f64> = gates.iter().filter_map(|g| g[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let _ = writeln!(out, "\t{}\t{}", gate_cell(avg(0)), gate_cell(avg(1)));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub n_p: usize,
    pub result: RowResult,
}

/// Retrain the configured model once per neighbour count and seed.
pub fn sweep_np(
    config: &TrainConfig,
    beam: &BeamConfig,
    data: &Corpora<'_>,
    values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::Config("sweep needs at least one neighbour count and one seed".into()));
    }
    let row = AblationRow {
        name: "sweep".into(),
        toggles: config.toggles.clone(),
    };
    values
        .iter()
        .map(|&n_p| {
            let mut c = config.clone();
            c.model.n_p = n_p;
            Ok(SweepPoint {
                n_p,
                result: run_row(&c, beam, data, &row, seeds)?,
            })
        })
        .collect()
}

pub fn sweep_tsv(points: &[SweepPoint]) -> String {
    let mut out = format!("n_p\t{}\n", METRIC_NAMES.join("\t"));
    for p in points {
        let _ = write!(out, "{}", p.n_p);
        metric_cells(&mut out, METRIC_NAMES.iter().map(|m| p.result.mean_metric(m)));
        out.push('\n');
    }
    out
}
