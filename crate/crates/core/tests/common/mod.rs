#![allow(dead_code)]

pub mod oracles;

use pigen_core::corpus::{
    build_vocab, generate_synthetic_corpus, split_by_patient, tokenize, ClinicalCode, DatasetSplit, Family, Gender,
    PatientStay, SplitRole, SynthConfig, Vocabulary,
};
use pigen_core::knowledge::MedicalKnowledgeGraph;
use pigen_core::model::{make_examples, DropoutPlan, Example, GenerationModel, ModelConfig, Resources, Toggles};
use pigen_core::retrieval::ExperienceBank;
use pigen_numerics::{finite_diff_errors, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct World {
    pub stays: Vec<PatientStay>,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub bank: ExperienceBank,
    pub graph: MedicalKnowledgeGraph,
}

impl World {
    pub fn from_stays(stays: Vec<PatientStay>, split: DatasetSplit) -> Self {
        let train = split.select(&stays, SplitRole::Train);
        let vocab = build_vocab(&train, 1).unwrap();
        let bank = ExperienceBank::build(&train, &vocab, 64, split.train_checksum()).unwrap();
        let graph = MedicalKnowledgeGraph::build(&train, split.train_checksum()).unwrap();
        Self {
            stays,
            split,
            vocab,
            bank,
            graph,
        }
    }

    pub fn synthetic(patients: usize, seed: u64) -> Self {
        let synth = generate_synthetic_corpus(&SynthConfig {
            num_patients: patients,
            num_conditions: 4,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = split_by_patient(&synth.stays, (0.8, 0.1, 0.1), seed).unwrap();
        Self::from_stays(synth.stays, split)
    }

    pub fn resources(&self) -> Resources<'_> {
        Resources {
            bank: &self.bank,
            graph: &self.graph,
        }
    }

    pub fn stays_of(&self, role: SplitRole) -> Vec<&PatientStay> {
        self.split.select(&self.stays, role)
    }

    pub fn model(&self, config: &ModelConfig, toggles: Toggles) -> GenerationModel {
        GenerationModel::new(config.clone(), toggles, self.vocab.len(), self.graph.len()).unwrap()
    }

    pub fn examples(&self, model: &GenerationModel, role: SplitRole) -> Vec<Example> {
        make_examples(
            &self.stays_of(role),
            &self.vocab,
            &self.bank,
            &model.config,
            &model.toggles,
            role == SplitRole::Train,
        )
        .unwrap()
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        dropout: 0.0,
        n_p: 2,
        ..ModelConfig::default()
    }
}

/// Four hand-written stays over five codes; records of six tokens.
pub fn gradient_world() -> World {
    let code = |f: Family, c: &str| ClinicalCode::new(f, c).unwrap();
    let mk = |i: usize, record: &str, codes: Vec<ClinicalCode>, instruction: &str| PatientStay {
        patient_id: format!("p{i}"),
        stay_id: format!("s{i}"),
        record_tokens: tokenize(record),
        codes,
        age_years: 40 + 10 * i as u32,
        gender: if i % 2 == 0 { Gender::Female } else { Gender::Male },
        instruction_tokens: tokenize(instruction),
    };
    let d1 = code(Family::Diagnosis, "d1");
    let d2 = code(Family::Diagnosis, "d2");
    let m1 = code(Family::Medication, "m1");
    let p1 = code(Family::Procedure, "p1");
    let p2 = code(Family::Procedure, "p2");
    let stays = vec![
        mk(0, "chest pain and short breath noted", vec![d1.clone(), m1.clone(), p1.clone()], "take aspirin daily with food ."),
        mk(1, "knee pain after a fall today", vec![d2.clone(), m1.clone(), p2.clone()], "rest knee and take pills ."),
        mk(2, "chest pain with a fall today", vec![d1.clone(), d2.clone(), m1.clone(), p1.clone()], "take aspirin and rest daily ."),
        mk(3, "short breath and knee pain noted", vec![d2, m1, p2], "rest daily with food and pills ."),
    ];
    let split = DatasetSplit {
        train: stays.iter().map(|s| s.stay_id.clone()).collect(),
        val: vec![],
        test: vec![],
        seed: 0,
    };
    World::from_stays(stays, split)
}

/// Twelve stays whose instruction repeats one word ten times.
pub fn looping_world() -> World {
    let stays: Vec<PatientStay> = (0..12)
        .map(|i| PatientStay {
            patient_id: format!("p{i}"),
            stay_id: format!("s{i}"),
            record_tokens: tokenize(["cough noted", "fever noted", "pain noted"][i % 3]),
            codes: vec![ClinicalCode::new(Family::Diagnosis, format!("d{}", i % 3)).unwrap()],
            age_years: 60,
            gender: Gender::Male,
            instruction_tokens: tokenize("rest rest rest rest rest rest rest rest rest rest ."),
        })
        .collect();
    let split = DatasetSplit {
        train: stays.iter().map(|s| s.stay_id.clone()).collect(),
        val: vec![],
        test: vec![],
        seed: 0,
    };
    World::from_stays(stays, split)
}

pub fn max_repeat(tokens: &[usize]) -> usize {
    let mut counts = std::collections::HashMap::new();
    for t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

/// Worst relative finite-difference error over every parameter of one full
/// model loss (d=8, two heads, N_P=2, five graph nodes, dropout off), and the
/// parameter where it occurs.
pub fn full_model_gradient_error() -> (f64, String) {
    let world = gradient_world();
    assert_eq!(world.graph.len(), 5);
    let mut model = world.model(&small_config(), Toggles::full());
    // Move away from the small-scale initialization so that every path
    // carries a gradient well above finite-difference roundoff.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids: Vec<_> = model.store.iter().map(|(id, name, t)| (id, name.to_string(), t.clone())).collect();
    for (id, name, t) in ids {
        let centre = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        let data = (0..t.len()).map(|_| centre + rng.gen_range(-0.6..0.6)).collect();
        model.store.set(id, Tensor::new(t.shape(), data).unwrap()).unwrap();
    }
    let examples = world.examples(&model, SplitRole::Train);
    assert!(examples.iter().all(|e| e.record.len() == 6 && e.experience.len() == 6));
    let batch: Vec<&Example> = examples.iter().collect();
    let res = world.resources();
    let errors = finite_diff_errors(
        |_tape, vars| {
            model
                .forward_loss(vars, &batch, &res, &DropoutPlan::eval())
                .map_err(|e| pigen_numerics::NumericsError::Checkpoint(e.to_string()))
        },
        model.store.tensors(),
        &[1e-3, 1e-5],
    )
    .unwrap();
    let names: Vec<&str> = model.store.iter().map(|(_, n, _)| n).collect();
    let worst = errors.iter().zip(&names).fold((0.0, ""), |acc, (&e, &n)| if e > acc.0 { (e, n) } else { acc });
    (worst.0, worst.1.to_string())
}
