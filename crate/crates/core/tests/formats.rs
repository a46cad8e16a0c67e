use multipl::corpus::{read_features, write_features, Features, Manifest, ManifestEntry, SymbolTable};
use multipl::lm::{train_ngram, NGramLM};
use multipl::model::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, EncoderConfig, LrSchedule, Model, TrainState};
use multipl::tensor::Tensor;
use multipl::train::{read_log, train_step, write_log, Sample, StepCounters, StepLog, StepOptions};
use proptest::prelude::*;

fn trained_state() -> TrainState {
    let mut cfg = EncoderConfig::new(5);
    cfg.d_model = 8;
    cfg.d_ff = 12;
    cfg.n_layers = 1;
    let symbols = SymbolTable::build(["ab ba"]);
    let model = Model::new(cfg, symbols, vec!["xx".into(), "yy".into()], 3).unwrap();
    let mut state = TrainState::new(model, LrSchedule::constant(0.05), 9);
    let features = Tensor::from_vec(30, 5, (0..150).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect());
    let s = Sample {
        id: "u".into(),
        language_id: "xx".into(),
        features,
        target: vec![2, 3],
        lid: Some(0),
    };
    let out = train_step(&mut state, &[&s], &StepOptions::plain(1.0), &mut StepCounters::default()).unwrap();
    assert!(out.is_some());
    state
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let state = trained_state();
    let bytes = encode_checkpoint(&state).unwrap();
    assert_eq!(&bytes[..4], b"CKP1");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, state);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckp");
    save_checkpoint(&p, &state).unwrap();
    assert_eq!(load_checkpoint(&p).unwrap(), state);
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let bytes = encode_checkpoint(&trained_state()).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn step_log_round_trips() {
    let logs = vec![
        StepLog { step: 1, phase: "base".into(), kind: "labeled".into(), loss: 3.25, cache_replacements: 0, pl_filtered_count: 0, lr: 0.03 },
        StepLog { step: 2, phase: "ssl".into(), kind: "unlabeled".into(), loss: 0.1 + 0.2, cache_replacements: 4, pl_filtered_count: 1, lr: 0.015 },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    write_log(&p, &logs).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    assert_eq!(read_log(&p).unwrap(), logs);
}

#[test]
fn nglm_text_round_trips() {
    let sents: Vec<Vec<&str>> = ["a b c", "b c a", "a a b", "c"].iter().map(|s| s.split(' ').collect()).collect();
    let lm = train_ngram(&sents, 3).unwrap();
    let text = lm.to_text();
    let back = NGramLM::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text);
    for w in [vec!["a", "b"], vec!["c", "c", "a"], vec!["zz"]] {
        assert_eq!(back.lm_logprob(&w, true), lm.lm_logprob(&w, true));
    }
}

proptest! {
    #[test]
    fn features_round_trip(frames in 1usize..20, dim in 1usize..6, seed in any::<u32>()) {
        let data: Vec<f32> = (0..frames * dim).map(|i| ((i as u32).wrapping_mul(seed | 1) % 1000) as f32 / 7.0 - 50.0).collect();
        let f = Features::new(frames, dim, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fea");
        write_features(&p, &f).unwrap();
        prop_assert_eq!(read_features(&p).unwrap(), f);
    }

    #[test]
    fn manifest_round_trips(rows in prop::collection::vec(("[a-z0-9_]{1,8}", 1usize..500, "[a-z]{2,3}", prop::option::of("[a-z][a-z ]{0,11}")), 1..8)) {
        let mut seen = std::collections::HashSet::new();
        let entries: Vec<ManifestEntry> = rows
            .into_iter()
            .filter(|r| seen.insert(r.0.clone()))
            .map(|(id, d, lang, tr)| ManifestEntry {
                feature_path: format!("features/{id}.fea").into(),
                id,
                duration_frames: d,
                language_id: lang,
                transcript: tr,
            })
            .collect();
        let m = Manifest::new(entries).unwrap();
        let text = m.to_tsv().unwrap();
        prop_assert_eq!(Manifest::from_tsv(&text).unwrap(), m);
    }
}
