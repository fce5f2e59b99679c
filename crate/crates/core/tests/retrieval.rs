mod common;

use common::oracles::brute_force_topk;
use pigen_core::corpus::{
    build_vocab, generate_synthetic_corpus, split_by_patient, ClinicalCode, Family, Gender, PatientStay, SplitRole,
    SynthConfig,
};
use pigen_core::retrieval::{
    build_experience, cosine, encode_instructions, neighbours_for, retrieve_topk, BankEntry, CodeVector,
    DemographicFilter, ExperienceBank, InstructionEncoder, RetrievalSettings,
};
use pigen_core::Error;
use pigen_numerics::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn entry(id: &str) -> BankEntry {
    BankEntry {
        stay_id: id.into(),
        instruction: vec![4, 5],
        gender: Gender::Female,
        age_years: 40,
    }
}

fn toy_bank(rows: Vec<Vec<f64>>) -> ExperienceBank {
    let dim = rows[0].len();
    let entries = (0..rows.len()).map(|i| entry(&format!("s{i:02}"))).collect();
    let codes: Vec<String> = (0..dim).map(|c| format!("c{c}")).collect();
    let other = (vec!["z".to_string()], vec![vec![1.0]; rows.len()]);
    ExperienceBank::from_parts(entries, [(codes, rows), other.clone(), other]).unwrap()
}

fn query(values: Vec<f64>) -> CodeVector {
    CodeVector {
        family: Family::Diagnosis,
        values,
    }
}

fn ranked(bank: &ExperienceBank, q: &CodeVector, n_p: usize, exclude: Option<&str>) -> Vec<(String, bool)> {
    retrieve_topk(bank, q, n_p, exclude, None)
        .unwrap()
        .into_iter()
        .map(|r| (bank.entries()[r.row].stay_id.clone(), r.padded))
        .collect()
}

#[test]
fn code_vector_examples() {
    let stay_codes = |codes: &[&str]| PatientStay {
        patient_id: "p".into(),
        stay_id: "q".into(),
        record_tokens: vec!["r".into()],
        codes: codes.iter().map(|c| ClinicalCode::new(Family::Diagnosis, *c).unwrap()).collect(),
        age_years: 30,
        gender: Gender::Male,
        instruction_tokens: vec!["x".into(); 5],
    };
    let bank = toy_bank(vec![vec![1.0, 0.0, 0.0]]);
    assert_eq!(bank.code_vector(&stay_codes(&["c0", "c1"]), Family::Diagnosis).values, [0.5, 0.5, 0.0]);
    assert_eq!(bank.code_vector(&stay_codes(&["c2"]), Family::Diagnosis).values, [0.0, 0.0, 1.0]);
    assert_eq!(bank.code_vector(&stay_codes(&["c9"]), Family::Diagnosis).values, [0.0, 0.0, 0.0]);
}

#[test]
fn exact_match_ranks_first_and_zero_query_falls_back_to_ids() {
    let bank = toy_bank(vec![
        vec![0.0, 1.0, 0.0],
        vec![0.5, 0.5, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.5, 0.0, 0.5],
    ]);
    let q = query(vec![0.5, 0.5, 0.0]);
    assert_eq!(ranked(&bank, &q, 1, None)[0].0, "s01");
    assert_eq!(ranked(&bank, &q, 5, None), brute_force_topk(&bank, Family::Diagnosis, &q.values, 5, None));
    let zero = ranked(&bank, &query(vec![0.0; 3]), 5, None);
    let ids: Vec<_> = zero.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["s00", "s01", "s02", "s03", "s04"]);
}

#[test]
fn exclusion_padding_and_empty_bank() {
    let bank = toy_bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let q = query(vec![1.0, 0.0]);
    let got = ranked(&bank, &q, 3, Some("s00"));
    assert_eq!(got, [("s01".into(), false), ("s01".into(), true), ("s01".into(), true)]);
    let single = toy_bank(vec![vec![1.0]]);
    let err = retrieve_topk(&single, &query(vec![1.0]), 2, Some("s00"), None).unwrap_err();
    assert!(matches!(err, Error::EmptyBank(_)));
}

#[test]
fn demographic_filter_is_respected() {
    let mut entries: Vec<BankEntry> = (0..6).map(|i| entry(&format!("s{i}"))).collect();
    for (i, e) in entries.iter_mut().enumerate() {
        e.gender = if i % 2 == 0 { Gender::Female } else { Gender::Male };
        e.age_years = [30, 60, 75][i % 3];
    }
    let rows = vec![vec![1.0]; 6];
    let other = (vec!["z".to_string()], rows.clone());
    let bank = ExperienceBank::from_parts(entries, [(vec!["c".into()], rows), other.clone(), other]).unwrap();
    let filter = DemographicFilter {
        gender: Gender::Male,
        age_group: pigen_core::corpus::AgeGroup::of(60),
    };
    let got = retrieve_topk(&bank, &query(vec![1.0]), 4, None, Some(&filter)).unwrap();
    for r in &got {
        assert!(filter.matches(&bank.entries()[r.row]));
    }
    assert!(got[1..].iter().all(|r| r.padded));
}

fn bank_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..=50, 1usize..=30).prop_flat_map(|(rows, dim)| {
        let cell = prop_oneof![3 => Just(0.0), 1 => Just(1.0), 1 => Just(0.5), 1 => 0.0f64..1.0];
        (
            prop::collection::vec(prop::collection::vec(cell.clone(), dim), rows),
            prop::collection::vec(cell, dim),
            1usize..=20,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn topk_matches_exhaustive_scan((rows, q, n_p) in bank_strategy(), exclude in 0usize..60) {
        let bank = toy_bank(rows);
        let exclude = format!("s{exclude:02}");
        let q = query(q);
        if bank.len() > 1 || exclude != "s00" {
            prop_assert_eq!(ranked(&bank, &q, n_p, Some(&exclude)), brute_force_topk(&bank, Family::Diagnosis, &q.values, n_p, Some(&exclude)));
        }
        prop_assert_eq!(ranked(&bank, &q, n_p, None), brute_force_topk(&bank, Family::Diagnosis, &q.values, n_p, None));
    }

    #[test]
    fn ranking_is_scale_invariant((rows, q, n_p) in bank_strategy(), scale in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25])) {
        let bank = toy_bank(rows);
        let scaled = query(q.iter().map(|v| v * scale).collect());
        let a: Vec<_> = ranked(&bank, &query(q), n_p, None).into_iter().map(|x| x.0).collect();
        let b: Vec<_> = ranked(&bank, &scaled, n_p, None).into_iter().map(|x| x.0).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_is_bounded(u in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let v: Vec<f64> = u.iter().rev().copied().collect();
        let c = cosine(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}

fn encoder_store(embed: Vec<f64>, vocab: usize, e: usize, w: Vec<f64>, b: Vec<f64>) -> (ParamStore, InstructionEncoder) {
    let mut store = ParamStore::new();
    let enc = InstructionEncoder::register(&mut store, 0, vocab, e, b.len()).unwrap();
    store.set(enc.embed, Tensor::new(&[vocab, e], embed).unwrap()).unwrap();
    store.set(enc.proj_w, Tensor::new(&[e, b.len()], w).unwrap()).unwrap();
    store.set(enc.proj_b, Tensor::new(&[b.len()], b).unwrap()).unwrap();
    (store, enc)
}

#[test]
fn instruction_encoder_examples() {
    // Four tokens with 2-dim embeddings; projection [[1,2],[0,1]], bias [1,-1].
    let embed = vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.0, 2.0, 1.0];
    let (store, enc) = encoder_store(embed, 4, 2, vec![1.0, 2.0, 0.0, 1.0], vec![1.0, -1.0]);
    let tape = Tape::inference();
    let params = store.bind_frozen(&tape);
    let out = encode_instructions(&params, &enc, &[&[0, 1], &[2, 3], &[1], &[1, 0]]).unwrap().value();
    // max(row0,row1) = [1,2] → [1·1+2·0+1, 1·2+2·1−1] = [2,3]
    // max(row2,row3) = [2,1] → [3, 4]
    // row1 = [0.5,2] → [1.5, 2]
    assert_eq!(out.row(0), [2.0, 3.0]);
    assert_eq!(out.row(1), [3.0, 4.0]);
    assert_eq!(out.row(2), [1.5, 2.0]);
    assert_eq!(out.row(3), out.row(0));
    assert!(encode_instructions(&params, &enc, &[&[]]).is_err());
}

fn synthetic_setup() -> (Vec<PatientStay>, ExperienceBank, Vec<Vec<usize>>, pigen_core::corpus::DatasetSplit) {
    let synth = generate_synthetic_corpus(&SynthConfig {
        num_patients: 2000,
        num_conditions: 5,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = split_by_patient(&synth.stays, (0.8, 0.1, 0.1), 1).unwrap();
    let train = split.select(&synth.stays, SplitRole::Train);
    let vocab = build_vocab(&train, 1).unwrap();
    let bank = ExperienceBank::build(&train, &vocab, 64, split.train_checksum()).unwrap();
    (synth.stays, bank, synth.active, split)
}

#[test]
fn synthetic_neighbours_share_conditions() {
    let (stays, bank, active, split) = synthetic_setup();
    let row_of: std::collections::HashMap<&str, usize> =
        stays.iter().enumerate().map(|(i, s)| (s.stay_id.as_str(), i)).collect();
    let train_ids: std::collections::HashSet<&str> = split.train.iter().map(String::as_str).collect();
    let settings = RetrievalSettings {
        families: Family::ALL.to_vec(),
        n_p: 5,
        demographic_filter: false,
    };
    let (mut top1_share, mut majority, mut total) = (0, 0, 0);
    for (i, stay) in stays.iter().enumerate() {
        let found = neighbours_for(&bank, stay, &settings, train_ids.contains(stay.stay_id.as_str())).unwrap();
        let shares: Vec<bool> = found
            .rows()
            .map(|r| {
                let j = row_of[bank.entries()[r].stay_id.as_str()];
                active[i].iter().any(|c| active[j].contains(c))
            })
            .collect();
        top1_share += shares[0] as usize;
        majority += (2 * shares.iter().filter(|&&s| s).count() >= shares.len()) as usize;
        total += 1;
    }
    assert!(top1_share as f64 >= 0.95 * total as f64, "{top1_share}/{total}");
    assert!(majority as f64 >= 0.95 * total as f64, "{majority}/{total}");
}

#[test]
fn experience_shape_and_persistence() {
    let (stays, bank, _, _) = synthetic_setup();
    let mut store = ParamStore::new();
    let enc = InstructionEncoder::register(&mut store, 3, 200, 8, 8).unwrap();
    let settings = RetrievalSettings {
        families: Family::ALL.to_vec(),
        n_p: 20,
        demographic_filter: true,
    };
    let exp = build_experience(&stays[0], &bank, &store, &enc, &settings, true).unwrap();
    assert_eq!(exp.matrix.shape(), [60, 8]);
    assert!(exp.matrix.all_finite());
    let families: Vec<Family> = exp.provenance.iter().map(|p| p.0).collect();
    assert!(families.windows(2).all(|w| w[0] <= w[1]));

    let bytes = bank.to_bytes();
    assert_eq!(ExperienceBank::from_bytes(&bytes).unwrap(), bank);
    let mut corrupt = bytes.clone();
    *corrupt.last_mut().unwrap() ^= 1;
    assert!(ExperienceBank::from_bytes(&corrupt).is_err());
}

#[test]
fn single_stay_bank_pads_every_family() {
    let bank = toy_bank(vec![vec![1.0]]);
    let mut store = ParamStore::new();
    let enc = InstructionEncoder::register(&mut store, 3, 8, 4, 4).unwrap();
    let stay = PatientStay {
        patient_id: "p".into(),
        stay_id: "other".into(),
        record_tokens: vec!["r".into()],
        codes: vec![ClinicalCode::new(Family::Diagnosis, "c0").unwrap()],
        age_years: 40,
        gender: Gender::Female,
        instruction_tokens: vec!["x".into(); 5],
    };
    let settings = RetrievalSettings {
        families: Family::ALL.to_vec(),
        n_p: 1,
        demographic_filter: false,
    };
    let exp = build_experience(&stay, &bank, &store, &enc, &settings, false).unwrap();
    assert_eq!(exp.matrix.shape(), [3, 4]);
    assert!(exp.provenance.iter().all(|p| p.1 == "s00"));
}
