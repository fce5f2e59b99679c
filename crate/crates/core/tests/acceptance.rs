//! Acceptance gate: one pass/fail line per criterion, then a single assert.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracles::{beam_oracle, brute_force_topk, naive_gcn, TableModel};
use common::{full_model_gradient_error, looping_world, max_repeat, small_config, World};
use pigen_core::corpus::{
    build_vocab, generate_synthetic_corpus, split_by_patient, write_corpus, ClinicalCode, Family, Gender, SplitRole,
    SynthConfig,
};
use pigen_core::decoding::{beam_search, decode_all, greedy, BeamConfig, LengthMode, SnapshotDecoder};
use pigen_core::knowledge::{gcn_forward, Gcn, MedicalKnowledgeGraph};
use pigen_core::metrics::{bleu, evaluate, meteor_lite, rouge_l, rouge_n, METRIC_NAMES};
use pigen_core::model::{make_examples, Example, GenerationModel, ModelConfig, Snapshot, Toggles};
use pigen_core::retrieval::{retrieve_topk, BankEntry, CodeVector, ExperienceBank};
use pigen_core::training::{
    ablation_rows, ablation_tsv, greedy_bleu4, history_csv, run_ablation_suite, run_experiment, sweep_np, train,
    Corpora, RowResult, TrainConfig,
};
use pigen_numerics::{op_gradient_suite, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, || {
        format!("{what} took {:.1} s, limit {limit_secs} s", elapsed.as_secs_f64())
    })
}

struct Gate {
    results: Vec<(usize, &'static str, bool)>,
}

impl Gate {
    fn run(&mut self, id: usize, name: &'static str, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        // Written to the raw handle so the line shows even when output is captured.
        let verdict = if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{verdict}] {name}: {detail} ({secs:.1} s)");
        self.results.push((id, name, ok));
    }
}

// ---------------------------------------------------------------- 1

fn random_bank(rng: &mut ChaCha8Rng) -> ExperienceBank {
    let rows = rng.gen_range(1..=50);
    let entries = (0..rows)
        .map(|i| BankEntry {
            stay_id: format!("s{i:02}"),
            instruction: vec![4],
            gender: Gender::Female,
            age_years: 40,
        })
        .collect();
    let families = std::array::from_fn(|_| {
        let dim = rng.gen_range(1..=30);
        let codes = (0..dim).map(|c| format!("c{c}")).collect();
        let density = rng.gen_range(0.05..0.6);
        let vectors = (0..rows)
            .map(|_| (0..dim).map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).collect())
            .collect();
        (codes, vectors)
    });
    ExperienceBank::from_parts(entries, families).unwrap()
}

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut queries = 0;
    for b in 0..100 {
        let bank = random_bank(&mut rng);
        for family in Family::ALL {
            let dim = bank.family(family).dim();
            for _ in 0..5 {
                let values: Vec<f64> = (0..dim).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
                let n_p = rng.gen_range(1..=20);
                let exclude = rng.gen_bool(0.5).then(|| format!("s{:02}", rng.gen_range(0..bank.len())));
                if exclude.is_some() && bank.len() == 1 {
                    continue;
                }
                let q = CodeVector { family, values };
                let got: Vec<(String, bool)> = retrieve_topk(&bank, &q, n_p, exclude.as_deref(), None)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|r| (bank.entries()[r.row].stay_id.clone(), r.padded))
                    .collect();
                let want = brute_force_topk(&bank, family, &q.values, n_p, exclude.as_deref());
                ensure(got == want, || format!("bank {b} {family:?}: {got:?} != {want:?}"))?;
                queries += 1;
            }
        }
    }
    within(start.elapsed(), 10, "retrieval oracle")?;
    Ok(format!("100 banks, {queries} queries identical to the exhaustive scan"))
}

// ---------------------------------------------------------------- 2

fn gcn_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut isolated = 0;
    for g in 0..50 {
        let n = rng.gen_range(1..=10);
        let d = rng.gen_range(1..=6);
        let nodes = (0..n).map(|i| ClinicalCode::new(Family::ALL[i % 3], format!("n{i}")).unwrap()).collect();
        let mut counts = vec![0.0; n * n];
        // Every third graph keeps its last node isolated.
        let linked = if g % 3 == 0 { n.saturating_sub(1) } else { n };
        for _ in 0..rng.gen_range(0..=2 * n) {
            if linked < 2 {
                break;
            }
            let (i, j) = (rng.gen_range(0..linked), rng.gen_range(0..linked));
            if i != j {
                let c = rng.gen_range(1..4) as f64;
                counts[i * n + j] += c;
                counts[j * n + i] += c;
            }
        }
        let graph = MedicalKnowledgeGraph::from_counts(nodes, counts, String::new()).map_err(|e| e.to_string())?;
        isolated += (0..n).filter(|&i| graph.adjacency_row(i).iter().all(|&v| v == 0.0)).count();
        let h0: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut store = ParamStore::new();
        let gcn = Gcn::register(&mut store, 0, n, d, 1).unwrap();
        store.set(gcn.h0, Tensor::new(&[n, d], h0.clone()).unwrap()).unwrap();
        store.set(gcn.layers[0].0, Tensor::new(&[d, d], w.clone()).unwrap()).unwrap();
        store.set(gcn.layers[0].1, Tensor::new(&[d], b.clone()).unwrap()).unwrap();
        let got = gcn_forward(&store, &gcn, &graph).map_err(|e| e.to_string())?;
        let want = naive_gcn(graph.adjacency(), n, &h0, &w, &b);
        for (x, y) in got.data().iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    ensure(isolated > 0, || "no isolated node was exercised".into())?;
    within(start.elapsed(), 5, "GCN oracle")?;
    Ok(format!("50 graphs ({isolated} isolated nodes), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ops = op_gradient_suite(1e-5).map_err(|e| e.to_string())?;
    let (op, op_err) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    ensure(op_err < 1e-6, || format!("op {op}: relative error {op_err:e}"))?;
    let (model_err, param) = full_model_gradient_error();
    ensure(model_err < 1e-4, || format!("full step: relative error {model_err:e} at {param}"))?;
    within(start.elapsed(), 60, "gradient suite")?;
    Ok(format!(
        "{} ops, worst {op_err:.1e} ({op}); full model step worst {model_err:.1e} ({param})",
        ops.len()
    ))
}

// ---------------------------------------------------------------- 4

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn metric_golden_set() -> Outcome {
    let start = Instant::now();
    let golden: Value = serde_json::from_str(include_str!("data/metrics_golden.json")).unwrap();
    let close = |a: f64, b: &Value| (a - b.as_f64().unwrap()).abs() <= 1e-9;
    let pairs = golden["pairs"].as_array().unwrap();
    for (i, pair) in pairs.iter().enumerate() {
        let c = vec![words(pair["candidate"].as_str().unwrap())];
        let r = vec![words(pair["reference"].as_str().unwrap())];
        let b = bleu(&c, &r, 4).map_err(|e| e.to_string())?;
        for n in 0..4 {
            ensure(close(b[n], &pair["bleu"][n]), || format!("pair {i} BLEU-{}: {}", n + 1, b[n]))?;
        }
        for (key, got) in [
            ("rouge1", rouge_n(&c, &r, 1)),
            ("rouge2", rouge_n(&c, &r, 2)),
            ("rougeL", rouge_l(&c, &r)),
            ("meteor", meteor_lite(&c, &r)),
        ] {
            let got = got.map_err(|e| e.to_string())?;
            ensure(close(got, &pair[key]), || format!("pair {i} {key}: {got}"))?;
        }
    }
    let c: Vec<Vec<String>> = pairs.iter().map(|p| words(p["candidate"].as_str().unwrap())).collect();
    let r: Vec<Vec<String>> = pairs.iter().map(|p| words(p["reference"].as_str().unwrap())).collect();
    let corpus = evaluate(&c, &r).map_err(|e| e.to_string())?;
    for n in 0..4 {
        let got = corpus.metric(&format!("BLEU-{}", n + 1)).unwrap();
        ensure(close(got, &golden["corpus"]["bleu"][n]), || format!("corpus BLEU-{}: {got}", n + 1))?;
    }

    let long = words(&(0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "));
    let ident = evaluate(&[long.clone()], &[long.clone()]).map_err(|e| e.to_string())?;
    let m = long.len() as f64;
    for name in METRIC_NAMES {
        let want = if name == "METEOR" { 1.0 - 0.5 / (m * m * m) } else { 1.0 };
        let got = ident.metric(name).unwrap();
        ensure((got - want).abs() < 1e-12, || format!("identity {name}: {got}"))?;
    }
    let other = words(&(0..40).map(|i| format!("v{i}")).collect::<Vec<_>>().join(" "));
    let disjoint = evaluate(&[long], &[other]).map_err(|e| e.to_string())?;
    for name in METRIC_NAMES {
        let got = disjoint.metric(name).unwrap();
        ensure(got == 0.0, || format!("disjoint {name}: {got}"))?;
    }
    within(start.elapsed(), 5, "metric golden set")?;
    Ok(format!("{} golden pairs and the corpus scores within 1e-9; identity and disjoint limits hold", pairs.len()))
}

// ---------------------------------------------------------------- 5-7, 10

const TRAIN_STAYS: usize = 2000;
const HELD_OUT_STAYS: usize = 200;

/// Synthetic corpus shared by the comparative criteria.
fn comparison_world() -> World {
    let patients = TRAIN_STAYS + 2 * HELD_OUT_STAYS;
    let synth = generate_synthetic_corpus(&SynthConfig {
        num_patients: patients,
        num_conditions: 8,
        noise_rate: 0.5,
        instruction_noise_rate: 0.1,
        multi_stay_rate: 0.0,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let share = |n: usize| n as f64 / patients as f64;
    let split = split_by_patient(&synth.stays, (share(TRAIN_STAYS), share(HELD_OUT_STAYS), share(HELD_OUT_STAYS)), 1).unwrap();
    World::from_stays(synth.stays, split)
}

fn comparison_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            d: 128,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
            n_p: 20,
            ..ModelConfig::default()
        },
        toggles: Toggles::full(),
        learning_rate: 1e-3,
        max_epochs: 10,
        patience: 3,
        ..TrainConfig::default()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn row(name: &str) -> pigen_core::training::AblationRow {
    ablation_rows().into_iter().find(|r| r.name == name).unwrap()
}

struct Comparison {
    rows: Vec<RowResult>,
    headline: Result<Duration, String>,
}

impl Comparison {
    fn get(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.name == name)
    }
}

fn run_comparison(world: &World) -> Comparison {
    let (train_s, val_s, test_s) = (world.stays_of(SplitRole::Train), world.stays_of(SplitRole::Val), world.stays_of(SplitRole::Test));
    let data = Corpora {
        train: &train_s,
        val: &val_s,
        test: &test_s,
        vocab: &world.vocab,
        bank: &world.bank,
        graph: &world.graph,
    };
    let config = comparison_config();
    let beam = BeamConfig::default();
    let start = Instant::now();
    let mut rows = match run_ablation_suite(&config, &beam, &data, &[row("Baseline"), row("Full Model")], &SEEDS) {
        Ok(r) => r,
        Err(e) => {
            return Comparison {
                rows: Vec::new(),
                headline: Err(e.to_string()),
            }
        }
    };
    let headline = Ok(start.elapsed());
    match run_ablation_suite(&config, &beam, &data, &[row("(d)"), row("(e)"), row("(f)")], &SEEDS) {
        Ok(more) => rows.extend(more),
        Err(e) => { let _ = writeln!(std::io::stderr(), "ablation rows failed: {e}"); }
    }
    let _ = writeln!(std::io::stderr(), "{}", ablation_tsv(&rows));
    Comparison { rows, headline }
}

fn bleu4_by_seed(r: &RowResult) -> Vec<f64> {
    r.seeds.iter().map(|s| s.report.metric("BLEU-4").unwrap()).collect()
}

fn headline(world: &World, cmp: &Comparison) -> Outcome {
    let elapsed = cmp.headline.clone()?;
    ensure(
        world.stays_of(SplitRole::Train).len() == TRAIN_STAYS
            && world.stays_of(SplitRole::Val).len() == HELD_OUT_STAYS
            && world.stays_of(SplitRole::Test).len() == HELD_OUT_STAYS,
        || "split sizes differ from 2000/200/200".into(),
    )?;
    let (base, full) = (cmp.get("Baseline").unwrap(), cmp.get("Full Model").unwrap());
    let (b, f) = (bleu4_by_seed(base), bleu4_by_seed(full));
    let wins = b.iter().zip(&f).filter(|(b, f)| f > b).count();
    let (bm, fm) = (base.mean_metric("BLEU-4"), full.mean_metric("BLEU-4"));
    let detail = format!("baseline BLEU-4 {bm:.4} {b:.4?}, full {fm:.4} {f:.4?}, full wins {wins}/3");
    ensure(fm > bm && wins >= 2, || detail.clone())?;
    within(elapsed, 30 * 60, "baseline and full runs")?;
    Ok(detail)
}

fn ablation_order(cmp: &Comparison) -> Outcome {
    let mean = |n: &str| cmp.get(n).map(|r| r.mean_metric("BLEU-4")).ok_or_else(|| format!("row {n} missing"));
    let full = mean("Full Model")?;
    let mut parts = vec![format!("full {full:.4}")];
    let mut ok = true;
    for name in ["(d)", "(e)", "(f)"] {
        let m = mean(name)?;
        ok &= full >= m - 0.002;
        parts.push(format!("{name} {m:.4}"));
    }
    let detail = parts.join(", ");
    ensure(ok, || format!("full below a component row: {detail}"))?;
    Ok(detail)
}

fn np_sweep(world: &World) -> Outcome {
    let (train_s, val_s, test_s) = (world.stays_of(SplitRole::Train), world.stays_of(SplitRole::Val), world.stays_of(SplitRole::Test));
    let data = Corpora {
        train: &train_s,
        val: &val_s,
        test: &test_s,
        vocab: &world.vocab,
        bank: &world.bank,
        graph: &world.graph,
    };
    let start = Instant::now();
    let values = [1, 5, 20, 50];
    let points = sweep_np(&comparison_config(), &BeamConfig::default(), &data, &values, &[0]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let scores: Vec<f64> = points.iter().map(|p| p.result.mean_metric("BLEU-4")).collect();
    let detail = values
        .iter()
        .zip(&scores)
        .map(|(n, s)| format!("N_P={n}: {s:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let interior = scores[1].max(scores[2]);
    ensure(interior >= scores[0] && interior >= scores[3], || format!("extreme beats interior: {detail}"))?;
    within(elapsed, 2 * 30 * 60, "N_P sweep")?;
    Ok(detail)
}

fn gate_sanity(cmp: &Comparison) -> Outcome {
    let full = cmp.get("Full Model").ok_or("full model row missing")?;
    let tsv = ablation_tsv(&cmp.rows);
    ensure(tsv.lines().next().unwrap().ends_with("gate_experience\tgate_knowledge"), || "gate columns missing".into())?;
    let mut logged = Vec::new();
    for s in &full.seeds {
        for g in s.gate_means {
            let g = g.ok_or("full model run without gate means")?;
            ensure(g > 0.0 && g < 1.0, || format!("gate mean {g} outside (0,1)"))?;
            logged.push(g);
        }
    }
    for r in cmp.rows.iter().filter(|r| !r.row.toggles.refine) {
        ensure(r.seeds.iter().all(|s| s.gate_means == [None, None]), || format!("{} reports gates", r.row.name))?;
    }

    // Every individual activation of a trained gated model, not only means.
    let world = World::synthetic(200, 21);
    let config = TrainConfig {
        model: ModelConfig { d: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, n_p: 3, max_instruction_len: 40, ..ModelConfig::default() },
        toggles: Toggles::full(),
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let probe = world.model(&config.model, config.toggles.clone());
    let train_ex = world.examples(&probe, SplitRole::Train);
    let test_ex = world.examples(&probe, SplitRole::Test);
    let out = train(&config, world.vocab.len(), &world.resources(), &train_ex, &test_ex, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let snapshot = Snapshot::new(&out.best, &world.resources()).map_err(|e| e.to_string())?;
    let refs: Vec<&Example> = test_ex.iter().collect();
    let batch = snapshot.prepare(&refs).map_err(|e| e.to_string())?;
    let dec = SnapshotDecoder { snapshot: &snapshot, batch: &batch };
    let ids: Vec<usize> = (0..refs.len()).collect();
    let decoded = decode_all(&dec, &ids, &BeamConfig::default()).map_err(|e| e.to_string())?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in &decoded {
        for range in d.state.gate_range() {
            let (a, b) = range.ok_or("a source fired no gate")?;
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    ensure(lo > 0.0 && hi < 1.0, || format!("activation range [{lo}, {hi}]"))?;
    Ok(format!(
        "full-model gate means {:.3?} (experience, knowledge per seed); {} decodes with activations in [{lo:.3}, {hi:.3}]",
        logged,
        decoded.len()
    ))
}

// ---------------------------------------------------------------- 8

fn decoding_contracts() -> Outcome {
    let world = World::synthetic(60, 12);
    let stays = world.stays_of(SplitRole::Val);
    for snap in 0..100u64 {
        let config = ModelConfig { init_seed: snap, d: 8, heads: 2, max_instruction_len: 12, ..small_config() };
        let toggles = if snap % 2 == 0 { Toggles::baseline() } else { Toggles::full() };
        let model = world.model(&config, toggles);
        let examples = make_examples(&stays[..3], &world.vocab, &world.bank, &model.config, &model.toggles, false).unwrap();
        let snapshot = Snapshot::new(&model, &world.resources()).unwrap();
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = snapshot.prepare(&refs).unwrap();
        let dec = SnapshotDecoder { snapshot: &snapshot, batch: &batch };
        let g = greedy(&dec, &[0, 1, 2], 12, 1.0).map_err(|e| e.to_string())?;
        let beam1 = BeamConfig { beam_size: 1, repetition_penalty: 1.0, max_len: 12, length_mode: LengthMode::Raw };
        for (i, gi) in g.iter().enumerate() {
            let b = beam_search(&dec, i, &beam1).map_err(|e| e.to_string())?;
            ensure(b.tokens == gi.tokens && b.score == gi.score, || format!("snapshot {snap} example {i}: beam 1 differs from greedy"))?;
        }
    }

    let mut oracle_cases = 0;
    for seed in 0..60 {
        let model = TableModel { vocab: 6, seed, scale: 2.0 };
        for k in 1..=3 {
            for theta in [1.0, 2.5] {
                let config = BeamConfig { beam_size: k, repetition_penalty: theta, max_len: 3, length_mode: LengthMode::Raw };
                let got = beam_search(&model, 0, &config).map_err(|e| e.to_string())?;
                let (tokens, score) = beam_oracle(&model, k, 3, theta);
                ensure(got.tokens == tokens && got.score == score, || {
                    format!("seed {seed} k {k} θ {theta}: {:?} {} vs {tokens:?} {score}", got.tokens, got.score)
                })?;
                oracle_cases += 1;
            }
        }
    }

    let world = looping_world();
    let config = TrainConfig {
        model: ModelConfig { d: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, dropout: 0.0, n_p: 2, max_instruction_len: 16, ..ModelConfig::default() },
        toggles: Toggles::baseline(),
        learning_rate: 1e-2,
        batch_size: 12,
        max_epochs: 60,
        patience: 60,
        seed: 1,
        clip_norm: 5.0,
    };
    let probe = world.model(&config.model, config.toggles.clone());
    let examples = world.examples(&probe, SplitRole::Train);
    let out = train(&config, world.vocab.len(), &world.resources(), &examples, &examples, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let snapshot = Snapshot::new(&out.best, &world.resources()).unwrap();
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = snapshot.prepare(&refs).unwrap();
    let dec = SnapshotDecoder { snapshot: &snapshot, batch: &batch };
    let plain = greedy(&dec, &[0], 16, 1.0).map_err(|e| e.to_string())?;
    let looped = max_repeat(&plain[0].tokens);
    let penalized = beam_search(&dec, 0, &BeamConfig { beam_size: 1, repetition_penalty: 10.0, max_len: 16, length_mode: LengthMode::Raw })
        .map_err(|e| e.to_string())?;
    let after = max_repeat(&penalized.tokens);
    ensure(looped >= 8 && after < looped, || format!("max repeat {looped} without penalty, {after} with"))?;
    Ok(format!(
        "beam 1 = greedy on 100 snapshots; {oracle_cases} enumeration cases exact; max repeat {looped} -> {after} with θ=10"
    ))
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let synth = SynthConfig { num_patients: 200, seed: 5, ..SynthConfig::default() };
    let a = generate_synthetic_corpus(&synth).unwrap();
    let b = generate_synthetic_corpus(&synth).unwrap();
    ensure(write_corpus(&a.stays) == write_corpus(&b.stays), || "corpus differs".into())?;
    let split_a = split_by_patient(&a.stays, (0.8, 0.1, 0.1), 3).unwrap();
    let split_b = split_by_patient(&b.stays, (0.8, 0.1, 0.1), 3).unwrap();
    ensure(serde_json::to_string(&split_a).unwrap() == serde_json::to_string(&split_b).unwrap(), || "split differs".into())?;
    let train_a = split_a.select(&a.stays, SplitRole::Train);
    let vocab = build_vocab(&train_a, 1).unwrap();
    ensure(vocab.to_file_string() == build_vocab(&split_b.select(&b.stays, SplitRole::Train), 1).unwrap().to_file_string(), || "vocabulary differs".into())?;
    let bank = |v| ExperienceBank::build(&train_a, v, 40, split_a.train_checksum()).unwrap().to_bytes();
    ensure(bank(&vocab) == bank(&vocab), || "bank differs".into())?;
    let graph = || MedicalKnowledgeGraph::build(&train_a, split_a.train_checksum()).unwrap();
    ensure(graph().matrix_file() == graph().matrix_file() && graph().nodes_file() == graph().nodes_file(), || "graph differs".into())?;

    let world = World::from_stays(a.stays.clone(), split_a.clone());
    let config = TrainConfig {
        model: ModelConfig { d: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, n_p: 3, max_instruction_len: 40, ..ModelConfig::default() },
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let (train_s, val_s, test_s) = (world.stays_of(SplitRole::Train), world.stays_of(SplitRole::Val), world.stays_of(SplitRole::Test));
    let data = Corpora { train: &train_s, val: &val_s, test: &test_s, vocab: &world.vocab, bank: &world.bank, graph: &world.graph };
    let beam = BeamConfig { max_len: 40, ..BeamConfig::default() };
    let r1 = run_experiment(&config, &beam, &data, &[]).map_err(|e| e.to_string())?;
    let r2 = run_experiment(&config, &beam, &data, &[]).map_err(|e| e.to_string())?;
    let sum = world.vocab.checksum();
    let ckpt1 = r1.outcome.best.to_checkpoint(&sum).unwrap();
    ensure(ckpt1 == r2.outcome.best.to_checkpoint(&sum).unwrap(), || "checkpoints differ".into())?;
    ensure(history_csv(&r1.outcome.history) == history_csv(&r2.outcome.history), || "histories differ".into())?;
    ensure(r1.generations == r2.generations && r1.report.to_tsv() == r2.report.to_tsv(), || "generations differ".into())?;

    let restored = GenerationModel::from_checkpoint(&ckpt1, &sum).map_err(|e| e.to_string())?;
    let val_ex = data.examples(&val_s, &config).unwrap();
    let before = greedy_bleu4(&r1.outcome.best, &data.resources(), &val_ex).unwrap();
    let after = greedy_bleu4(&restored, &data.resources(), &val_ex).unwrap();
    ensure(before.to_bits() == after.to_bits() && before.to_bits() == r1.outcome.best_bleu4.to_bits(), || {
        format!("validation BLEU-4 {before} before, {after} after reload, {} in history", r1.outcome.best_bleu4)
    })?;
    Ok(format!("artifacts, checkpoints, histories and generations byte-identical; reloaded BLEU-4 {after:.6} exact"))
}

#[test]
fn acceptance() {
    let mut gate = Gate { results: Vec::new() };
    gate.run(1, "retrieval oracle", retrieval_oracle);
    gate.run(2, "GCN oracle", gcn_oracle);
    gate.run(3, "gradient suite", gradient_suite);
    gate.run(4, "metric golden set", metric_golden_set);

    let world = comparison_world();
    let cmp = run_comparison(&world);
    gate.run(5, "full model beats baseline", || headline(&world, &cmp));
    gate.run(6, "ablation ordering", || ablation_order(&cmp));
    gate.run(7, "N_P sweep shape", || np_sweep(&world));
    gate.run(8, "decoding contracts", decoding_contracts);
    gate.run(9, "determinism and persistence", determinism);
    gate.run(10, "gate sanity", || gate_sanity(&cmp));

    let failed: Vec<String> = gate.results.iter().filter(|r| !r.2).map(|r| format!("{} ({})", r.0, r.1)).collect();
    let _ = writeln!(std::io::stderr(), "{}/{} criteria passed", gate.results.len() - failed.len(), gate.results.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
