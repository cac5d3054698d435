#![allow(dead_code)]

pub mod fd;

use clwe_nmt::model::{HeadKind, Model, TransformerConfig};
use clwe_nmt::tensor::Mat;
use clwe_nmt::vocab::{merge, LanguageVocab, MultiVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Mat<f32> {
    let mut m = Mat::zeros(0, dim);
    for _ in 0..n {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        m.push_row(&v);
    }
    m
}

/// `words` random unit-norm words `w0..` per language.
pub fn random_vocab(langs: &[&str], words: usize, dim: usize, seed: u64) -> MultiVocab {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: Vec<LanguageVocab> = langs
        .iter()
        .map(|l| LanguageVocab {
            language: l.to_string(),
            words: (0..words).map(|i| format!("w{i}")).collect(),
            rows: unit_rows(words, dim, &mut rng),
            hard_oov: Vec::new(),
            composed: Vec::new(),
        })
        .collect();
    merge(&per).unwrap()
}

pub fn tiny_model(langs: &[&str], words: usize, d: usize, layers: usize, head: HeadKind, seed: u64) -> Model {
    let cfg = TransformerConfig { dropout: 0.0, ..TransformerConfig::desk(d, layers, head) };
    Model::new(cfg, random_vocab(langs, words, d, seed), seed).unwrap()
}

pub fn words(idx: &[usize]) -> Vec<String> {
    idx.iter().map(|i| format!("w{i}")).collect()
}
