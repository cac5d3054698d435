mod common;

use std::collections::BTreeSet;

use clwe_nmt::alignment::LinearMap;
use clwe_nmt::embeddings::EmbeddingTable;
use clwe_nmt::model::{evaluate, train, Group, HeadKind, Model, ParallelSet, Schedule, TrainConfig};
use clwe_nmt::tensor::{cosine, dot, Mat};
use clwe_nmt::translate::{beam_search, plug_in_language, vmf_decode_step, PlugIn, TranslationRequest};
use clwe_nmt::vocab::{LanguageMask, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sentences(n: usize, words: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..rng.random_range(2..7)).map(|_| rng.random_range(0..words)).collect()).collect()
}

#[test]
fn vmf_decode_step_matches_bruteforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = common::unit_rows(40, 8, &mut rng);
    for _ in 0..200 {
        let y: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut allowed: Vec<usize> = (0..40).filter(|_| rng.random_bool(0.4)).collect();
        if allowed.is_empty() {
            allowed.push(7);
        }
        let mask = LanguageMask { language: "aa".into(), allowed: allowed.clone() };
        let got = vmf_decode_step(&y, &emb, &mask).unwrap();
        let best = allowed.iter().map(|&t| cosine(&y, emb.row(t))).fold(f32::NEG_INFINITY, f32::max);
        assert!(allowed.contains(&got));
        assert_eq!(cosine(&y, emb.row(got)), best);
    }
    let empty = LanguageMask { language: "aa".into(), allowed: vec![] };
    assert!(vmf_decode_step(&[1.0; 8], &emb, &empty).is_err());
}

/// Step-by-step argmax decoding written against the model's raw outputs.
fn greedy(model: &Model, src: &[usize], tgt_lang: &str) -> Vec<usize> {
    let tag = model.vocab.tag(tgt_lang).unwrap();
    let mask = model.vocab.target_mask(tgt_lang).unwrap();
    let enc = model.encode(src).unwrap();
    let mut out = Vec::new();
    for _ in 0..2 * src.len() {
        let prefix: Vec<usize> = std::iter::once(tag).chain(out.iter().copied()).collect();
        let h = model.decoder_last_hidden(&enc, &prefix).unwrap();
        let emb = &model.vocab.embedding;
        let score = |t: usize| match model.config.head {
            HeadKind::Softmax => dot(&h, emb.row(t)),
            HeadKind::Vmf => cosine(&h, emb.row(t)),
        };
        let mut best = mask.allowed[0];
        for &t in &mask.allowed {
            if score(t) > score(best) {
                best = t;
            }
        }
        out.push(best);
        if best == EOS {
            break;
        }
    }
    out
}

#[test]
fn beam_one_is_greedy() {
    for head in [HeadKind::Softmax, HeadKind::Vmf] {
        let model = common::tiny_model(&["aa", "bb"], 12, 16, 2, head, 9);
        for src in random_sentences(20, 12, 3) {
            let mut req = TranslationRequest::new("aa", "bb", vec![common::words(&src)]);
            req.suppress_repeats = None;
            let hyp = beam_search(&model, &req).unwrap().remove(0).unwrap();
            let src_idx = model.index_words("aa", &common::words(&src));
            assert_eq!(hyp.tokens, greedy(&model, &src_idx, "bb"), "{head:?}");
        }
    }
}

#[test]
fn wider_beams_stay_in_the_target_language() {
    let model = common::tiny_model(&["aa", "bb", "cc"], 10, 16, 1, HeadKind::Softmax, 2);
    let allowed: BTreeSet<usize> = model.vocab.target_mask("cc").unwrap().allowed.into_iter().collect();
    for beam in [2, 4] {
        let sents = random_sentences(10, 10, beam as u64).iter().map(|s| common::words(s)).collect();
        let req = TranslationRequest::new("aa", "cc", sents).with_beam(beam);
        for h in beam_search(&model, &req).unwrap() {
            assert!(h.unwrap().tokens.iter().all(|t| allowed.contains(t)));
        }
    }
}

#[test]
fn trailing_padding_does_not_change_outputs() {
    let model = common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Softmax, 4);
    let src = model.index_words("aa", &common::words(&[3, 1, 4, 1, 5]));
    let mut padded = src.clone();
    padded.extend([PAD, PAD, PAD]);
    let a = model.encode(&src).unwrap();
    let b = model.encode(&padded).unwrap();
    for i in 0..src.len() {
        for (x, y) in a.states.row(i).iter().zip(b.states.row(i)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
    let prefix = [model.vocab.tag("bb").unwrap(), 20, 21];
    let ha = model.decoder_last_hidden(&a, &prefix).unwrap();
    let hb = model.decoder_last_hidden(&b, &prefix).unwrap();
    for (x, y) in ha.iter().zip(&hb) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Vmf, 5);
    model.set_frozen(&[Group::FrozenEmbeddings, Group::Encoder].into_iter().collect());
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.transformer_checksum(), model.transformer_checksum());
    assert_eq!(back.vocab, model.vocab);
    assert_eq!(back.params.frozen(), model.params.frozen());

    // a vocabulary file that no longer matches is refused
    std::fs::write(Model::vocab_path(&path), "garbage\n").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn plug_in_only_appends_rows() {
    let model = common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Softmax, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let words: Vec<String> = (0..7).map(|i| format!("v{i}")).collect();
    let table = EmbeddingTable::new("cc", words, common::unit_rows(7, 16, &mut rng)).unwrap();
    let map = LinearMap { source_language: "cc".into(), target_language: "aa".into(), matrix: Mat::identity(16), orthogonal: true };
    let opts = PlugIn { language: "cc", pivot: "aa", renormalize: true, corpus: None, bank: None, add_tag: true };
    let plugged = plug_in_language(&model, &table, &map, &opts).unwrap();
    assert_eq!(plugged.transformer_checksum(), model.transformer_checksum());
    assert_eq!(plugged.vocab.len(), model.vocab.len() + 8);
    for i in 0..model.vocab.len() {
        assert_eq!(plugged.vocab.token(i), model.vocab.token(i));
        assert_eq!(plugged.vocab.embedding.row(i), model.vocab.embedding.row(i));
    }
    let tag = plugged.vocab.tag("cc").unwrap();
    assert_eq!(plugged.vocab.embedding.row(tag), model.vocab.embedding.row(model.vocab.tag("aa").unwrap()));
    // the same language cannot be plugged twice
    assert!(plug_in_language(&plugged, &table, &map, &opts).is_err());
}

fn copy_task(model: &Model, n: usize, seed: u64) -> ParallelSet {
    let examples = random_sentences(n, 10, seed)
        .iter()
        .map(|s| model.example("aa", &common::words(s), "bb", &common::words(s)).unwrap())
        .collect();
    ParallelSet { src_lang: "aa".into(), tgt_lang: "bb".into(), examples }
}

#[test]
fn training_lowers_loss_and_keeps_word_rows() {
    for seed in 1..=3 {
        let mut model = common::tiny_model(&["aa", "bb"], 10, 16, 1, HeadKind::Softmax, seed);
        let set = copy_task(&model, 40, seed);
        let mut cfg = TrainConfig { max_updates: 120, batch_tokens: 200, patience: None, seed, ..TrainConfig::default() };
        cfg.optimizer.schedule = Schedule::Noam { warmup: 30 };
        let before = evaluate(&model, std::slice::from_ref(&set), &cfg).unwrap().loss_per_token;
        let words = model.vocab.word_rows_checksum();
        let report = train(&mut model, std::slice::from_ref(&set), &[], &cfg).unwrap();
        let after = evaluate(&model, std::slice::from_ref(&set), &cfg).unwrap().loss_per_token;
        assert_eq!(report.updates, 120);
        assert!(after < 0.8 * before, "seed {seed}: {before} -> {after}");
        assert_eq!(model.vocab.word_rows_checksum(), words);
    }
}

#[test]
fn frozen_groups_do_not_move_during_training() {
    let mut model = common::tiny_model(&["aa", "bb"], 10, 16, 1, HeadKind::Vmf, 7);
    let set = copy_task(&model, 20, 7);
    model.set_frozen(&[Group::FrozenEmbeddings, Group::Decoder].into_iter().collect());
    let (enc, dec) = (model.group_checksum(Group::Encoder), model.group_checksum(Group::Decoder));
    let cfg = TrainConfig { max_updates: 30, batch_tokens: 200, seed: 7, ..TrainConfig::default() };
    train(&mut model, &[set], &[], &cfg).unwrap();
    assert_eq!(model.group_checksum(Group::Decoder), dec);
    assert_ne!(model.group_checksum(Group::Encoder), enc);
}
