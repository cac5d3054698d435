//! Skip-gram with negative sampling over word + character n-gram inputs.
//!
//! The input representation of a word is the mean of its own vector and its
//! n-gram bucket vectors. Each center word's hidden vector is computed once
//! and its gradient, accumulated over all context targets, is added to every
//! component. Learning rate decays linearly to zero over all epochs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::subword::ngrams;
use super::{EmbeddingTable, SubwordBank};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{axpy, dot, Mat};

const NEG_TABLE_SIZE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipgramConfig {
    pub language: String,
    pub dim: usize,
    /// Maximum context radius; each center samples its radius from `1..=window`.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub min_count: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub buckets: usize,
    /// Frequent-word subsampling threshold; 0 disables.
    pub subsample: f64,
    pub seed: u64,
    /// Sentence shards trained independently and averaged per epoch.
    pub workers: usize,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        Self {
            language: "xx".into(),
            dim: 300,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.05,
            min_count: 5,
            min_n: 3,
            max_n: 6,
            buckets: 1 << 18,
            subsample: 1e-3,
            seed: 1,
            workers: 1,
        }
    }
}

impl SkipgramConfig {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.negatives == 0 || self.dim == 0 || self.buckets == 0 {
            return Err(Error::Config("window, negatives, dim and buckets must be >= 1".into()));
        }
        if self.min_n == 0 || self.min_n > self.max_n {
            return Err(Error::Config(format!("invalid n-gram range {}..={}", self.min_n, self.max_n)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// A fixed set of (center, context, negatives) triples for measuring the
/// sampled objective at different points of training.
#[derive(Debug, Clone)]
pub struct Probe {
    triples: Vec<(usize, usize, Vec<usize>)>,
}

#[derive(Debug, Clone)]
struct Params {
    /// `nwords + buckets` rows.
    input: Mat<f32>,
    output: Mat<f32>,
}

#[derive(Debug, Clone)]
pub struct SkipgramModel {
    cfg: SkipgramConfig,
    words: Vec<String>,
    counts: Vec<usize>,
    components: Vec<Vec<usize>>,
    sentences: Vec<Vec<usize>>,
    neg_table: Vec<usize>,
    keep_prob: Vec<f64>,
    params: Params,
    touched: Vec<bool>,
    epoch: usize,
    total_tokens: usize,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl SkipgramModel {
    pub fn new(corpus: &[Vec<String>], cfg: &SkipgramConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for w in s {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut vocab: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= cfg.min_count).collect();
        if vocab.is_empty() {
            return Err(Error::Input(format!("no word reaches min_count {}", cfg.min_count)));
        }
        vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words: Vec<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
        let counts: Vec<usize> = vocab.iter().map(|&(_, c)| c).collect();
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, &(w, _))| (w, i)).collect();
        let nwords = words.len();

        let components = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut c = vec![i];
                c.extend(ngrams(w, cfg.min_n, cfg.max_n).iter().map(|g| nwords + super::fnv1a(g.as_bytes()) as usize % cfg.buckets));
                c
            })
            .collect();
        let sentences: Vec<Vec<usize>> = corpus
            .iter()
            .map(|s| s.iter().filter_map(|w| index.get(w.as_str()).copied()).collect())
            .collect();
        let total_tokens: usize = sentences.iter().map(Vec::len).sum();

        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut neg_table = Vec::with_capacity(NEG_TABLE_SIZE);
        for (i, w) in weights.iter().enumerate() {
            let n = ((w / wsum) * NEG_TABLE_SIZE as f64).ceil() as usize;
            neg_table.extend(std::iter::repeat_n(i, n));
        }
        let keep_prob = counts
            .iter()
            .map(|&c| {
                if cfg.subsample <= 0.0 {
                    1.0
                } else {
                    let f = c as f64 / total_tokens as f64;
                    ((cfg.subsample / f).sqrt() + cfg.subsample / f).min(1.0)
                }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / cfg.dim as f32;
        let input_rows = nwords + cfg.buckets;
        let input = Mat::from_vec(
            input_rows,
            cfg.dim,
            (0..input_rows * cfg.dim).map(|_| rng.random_range(-bound..bound)).collect(),
        );
        let output = Mat::zeros(nwords, cfg.dim);
        Ok(Self {
            cfg: cfg.clone(),
            words,
            counts,
            components,
            sentences,
            neg_table,
            keep_prob,
            params: Params { input, output },
            touched: vec![false; input_rows],
            epoch: 0,
            total_tokens,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    fn hidden(&self, params: &Params, w: usize) -> Vec<f32> {
        let comps = &self.components[w];
        let mut h = vec![0.0f32; self.cfg.dim];
        for &c in comps {
            axpy(1.0, params.input.row(c), &mut h);
        }
        let k = 1.0 / comps.len() as f32;
        h.iter_mut().for_each(|v| *v *= k);
        h
    }

    /// Draw a probe of `n` triples from the corpus.
    pub fn probe(&self, n: usize, seed: u64) -> Probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triples = Vec::with_capacity(n);
        let nonempty: Vec<&Vec<usize>> = self.sentences.iter().filter(|s| s.len() >= 2).collect();
        while triples.len() < n && !nonempty.is_empty() {
            let s = nonempty[rng.random_range(0..nonempty.len())];
            let i = rng.random_range(0..s.len());
            let j = loop {
                let j = rng.random_range(0..s.len());
                if j != i {
                    break j;
                }
            };
            let negs = (0..self.cfg.negatives).map(|_| self.neg_table[rng.random_range(0..self.neg_table.len())]).collect();
            triples.push((s[i], s[j], negs));
        }
        Probe { triples }
    }

    /// Mean sampled negative log-likelihood over the probe.
    pub fn probe_loss(&self, probe: &Probe) -> f64 {
        let mut total = 0.0f64;
        for (center, ctx, negs) in &probe.triples {
            let h = self.hidden(&self.params, *center);
            let pos = dot(&h, self.params.output.row(*ctx));
            total -= (sigmoid(pos) as f64).max(1e-12).ln();
            for &n in negs {
                let s = dot(&h, self.params.output.row(n));
                total -= (1.0 - sigmoid(s) as f64).max(1e-12).ln();
            }
        }
        total / probe.triples.len().max(1) as f64
    }

    fn train_shard(&self, params: &mut Params, touched: &mut [bool], shard: &[Vec<usize>], mut processed: usize, rng: &mut ChaCha8Rng) {
        let total = (self.total_tokens * self.cfg.epochs).max(1) as f32;
        let dim = self.cfg.dim;
        let mut grad = vec![0.0f32; dim];
        for sent in shard {
            let kept: Vec<usize> = sent.iter().copied().filter(|&w| rng.random::<f64>() < self.keep_prob[w]).collect();
            for (i, &w) in kept.iter().enumerate() {
                let lr = self.cfg.learning_rate * (1.0 - processed as f32 / total).max(1e-4);
                processed += 1;
                let radius = rng.random_range(1..=self.cfg.window);
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(kept.len() - 1);
                if lo == hi {
                    continue;
                }
                let h = self.hidden(params, w);
                grad.iter_mut().for_each(|g| *g = 0.0);
                for (j, &ctx) in kept.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    for k in 0..=self.cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = self.neg_table[rng.random_range(0..self.neg_table.len())];
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = params.output.row_mut(target);
                        let g = lr * (label - sigmoid(dot(&h, out)));
                        axpy(g, out, &mut grad);
                        axpy(g, &h, out);
                    }
                }
                for &c in &self.components[w] {
                    axpy(1.0, &grad, params.input.row_mut(c));
                    touched[c] = true;
                }
            }
        }
    }

    /// One pass over the corpus.
    pub fn train_epoch(&mut self) {
        let workers = self.cfg.workers.min(self.sentences.len()).max(1);
        let epoch_start = self.epoch * self.total_tokens;
        if workers == 1 {
            let mut params = std::mem::replace(&mut self.params, Params { input: Mat::zeros(0, 0), output: Mat::zeros(0, 0) });
            let mut touched = std::mem::take(&mut self.touched);
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ((self.epoch as u64 + 1) << 32));
            self.train_shard(&mut params, &mut touched, &self.sentences, epoch_start, &mut rng);
            self.params = params;
            self.touched = touched;
        } else {
            let shard_len = self.sentences.len().div_ceil(workers);
            let shards: Vec<&[Vec<usize>]> = self.sentences.chunks(shard_len).collect();
            let results = exec::map_range(shards.len(), |k| {
                let mut params = self.params.clone();
                let mut touched = vec![false; self.touched.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ((self.epoch as u64 + 1) << 32) ^ (k as u64 + 1));
                // each shard decays the rate as if it were the whole epoch
                self.train_shard(&mut params, &mut touched, shards[k], epoch_start, &mut rng);
                (params, touched)
            });
            let inv = 1.0 / results.len() as f32;
            let mut input = Mat::zeros(self.params.input.rows(), self.cfg.dim);
            let mut output = Mat::zeros(self.params.output.rows(), self.cfg.dim);
            for (p, t) in &results {
                axpy(inv, p.input.data(), input.data_mut());
                axpy(inv, p.output.data(), output.data_mut());
                for (a, &b) in self.touched.iter_mut().zip(t) {
                    *a |= b;
                }
            }
            self.params = Params { input, output };
        }
        self.epoch += 1;
    }

    /// Compose final word vectors and export the bucket bank.
    ///
    /// Buckets never updated during training are zeroed so that they count
    /// as dead for out-of-vocabulary composition.
    pub fn finish(self) -> Result<(EmbeddingTable, SubwordBank)> {
        let nwords = self.words.len();
        let dim = self.cfg.dim;
        let mut table = Mat::zeros(nwords, dim);
        for w in 0..nwords {
            let h = self.hidden(&self.params, w);
            table.row_mut(w).copy_from_slice(&h);
        }
        let mut buckets = Mat::zeros(self.cfg.buckets, dim);
        for b in 0..self.cfg.buckets {
            if self.touched[nwords + b] {
                buckets.row_mut(b).copy_from_slice(self.params.input.row(nwords + b));
            }
        }
        let table = EmbeddingTable::new(self.cfg.language.clone(), self.words, table)?;
        Ok((table, SubwordBank::new(self.cfg.min_n, self.cfg.max_n, self.cfg.buckets, buckets)))
    }
}

/// Train skip-gram vectors with subword composition.
///
/// Deterministic for a fixed seed; with `workers > 1` shards are trained
/// from the same epoch-start parameters and averaged, so results depend on
/// the worker count.
pub fn train_skipgram(corpus: &[Vec<String>], cfg: &SkipgramConfig) -> Result<(EmbeddingTable, SubwordBank)> {
    let mut model = SkipgramModel::new(corpus, cfg)?;
    for _ in 0..cfg.epochs {
        model.train_epoch();
    }
    model.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    /// `a` and `b` appear in the same contexts; `c` in disjoint ones.
    fn cooccurrence_corpus() -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx1 = ["red", "blue", "green", "pink"];
        let ctx2 = ["seven", "nine", "four", "ten"];
        let mut out = Vec::new();
        for _ in 0..3000 {
            let (word, ctx) = match rng.random_range(0..3) {
                0 => ("alpha", &ctx1),
                1 => ("bravo", &ctx1),
                _ => ("zulu", &ctx2),
            };
            let mut s: Vec<String> = (0..4).map(|_| ctx[rng.random_range(0..4)].to_string()).collect();
            s.insert(2, word.to_string());
            out.push(s);
        }
        out
    }

    fn cfg() -> SkipgramConfig {
        SkipgramConfig { dim: 16, epochs: 3, buckets: 1 << 12, min_n: 3, max_n: 4, subsample: 0.0, ..Default::default() }
    }

    #[test]
    fn shared_contexts_give_closer_vectors() {
        let (t, _) = train_skipgram(&cooccurrence_corpus(), &cfg()).unwrap();
        let (a, b, c) = (t.vector("alpha").unwrap(), t.vector("bravo").unwrap(), t.vector("zulu").unwrap());
        assert!(cosine(a, b) > cosine(a, c), "cos(a,b)={} cos(a,c)={}", cosine(a, b), cosine(a, c));
    }

    #[test]
    fn shape_and_determinism() {
        let corpus = cooccurrence_corpus();
        let (t1, b1) = train_skipgram(&corpus, &cfg()).unwrap();
        let (t2, b2) = train_skipgram(&corpus, &cfg()).unwrap();
        assert_eq!(t1.len(), 11);
        assert_eq!(t1.dim(), 16);
        assert_eq!(t1.matrix(), t2.matrix());
        assert_eq!(b1.buckets, b2.buckets);
    }

    #[test]
    fn min_count_filters_rare_words() {
        let mut corpus = cooccurrence_corpus();
        corpus.push(vec!["hapax".into(), "red".into()]);
        let (t, _) = train_skipgram(&corpus, &cfg()).unwrap();
        assert!(t.index_of("hapax").is_none());
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        assert!(matches!(train_skipgram(&[], &cfg()), Err(Error::Input(_))));
        assert!(matches!(train_skipgram(&[vec![]], &cfg()), Err(Error::Input(_))));
    }

    #[test]
    fn objective_decreases_over_first_epoch() {
        let corpus = cooccurrence_corpus();
        let mut m = SkipgramModel::new(&corpus, &cfg()).unwrap();
        let probe = m.probe(500, 11);
        let before = m.probe_loss(&probe);
        m.train_epoch();
        let after = m.probe_loss(&probe);
        assert!(after < before, "before {before} after {after}");
    }

    #[test]
    fn word_vector_is_mean_of_components() {
        let corpus = cooccurrence_corpus();
        let m = SkipgramModel::new(&corpus, &cfg()).unwrap();
        let w = m.words().iter().position(|w| w == "alpha").unwrap();
        let comps = m.components[w].clone();
        let mut expect = vec![0.0f64; 16];
        for &c in &comps {
            for (e, &v) in expect.iter_mut().zip(m.params.input.row(c)) {
                *e += v as f64;
            }
        }
        let h = m.hidden(&m.params, w);
        for (e, v) in expect.iter().zip(h) {
            assert!((e / comps.len() as f64 - v as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn sharded_training_is_reproducible() {
        let corpus = cooccurrence_corpus();
        let c = SkipgramConfig { workers: 3, ..cfg() };
        let (t1, _) = train_skipgram(&corpus, &c).unwrap();
        let (t2, _) = train_skipgram(&corpus, &c).unwrap();
        assert_eq!(t1.matrix(), t2.matrix());
    }
}
