//! Supervised training over a concatenation of parallel corpora.
//!
//! Batches are token-budgeted and hold one language pair each, so a single
//! target mask serves the whole batch. Per-example forward/backward passes
//! run through [`crate::exec`]; gradients are summed in example order, which
//! keeps results identical with or without threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{apply_update, OptimizerConfig, OptimizerState};
use super::params::Gradients;
use super::transformer::{Example, ExampleOutput, HeadKind, HeadTarget};
use super::Model;
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Upper bound on Σ max(source, target) tokens per batch.
    pub batch_tokens: usize,
    /// Batches summed per update.
    pub accumulation: usize,
    pub label_smoothing: f64,
    pub lambda_vmf: f64,
    pub max_updates: usize,
    /// Stop after this many dev evaluations without improvement.
    pub patience: Option<usize>,
    pub dev_every: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_tokens: 1024,
            accumulation: 1,
            label_smoothing: 0.1,
            lambda_vmf: 0.2,
            max_updates: 2000,
            patience: Some(5),
            dev_every: 200,
            log_every: 50,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.lambda_vmf <= 0.0 {
            return Err(Error::Config("lambda_vmf must be positive".into()));
        }
        if self.batch_tokens == 0 || self.accumulation == 0 || self.dev_every == 0 {
            return Err(Error::Config("batch_tokens, accumulation and dev_every must be positive".into()));
        }
        Ok(())
    }
}

/// Examples of one language pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelSet {
    pub src_lang: String,
    pub tgt_lang: String,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub set: usize,
    pub examples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub update: usize,
    pub lr: f64,
    /// Mean per-token loss of the last update.
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub updates: usize,
    pub trace: Vec<TraceEntry>,
    pub best_dev_loss: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss_per_token: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

fn batch_cost(ex: &Example) -> usize {
    ex.src.len().max(ex.target_tokens())
}

/// Token-budgeted, language-homogeneous batches in shuffled order.
pub fn make_batches(sets: &[ParallelSet], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut out = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        let mut idx: Vec<usize> = (0..set.examples.len()).collect();
        idx.shuffle(rng);
        let mut cur = Batch { set: s, examples: Vec::new() };
        let mut used = 0;
        for i in idx {
            let c = batch_cost(&set.examples[i]);
            if !cur.examples.is_empty() && used + c > batch_tokens {
                out.push(std::mem::replace(&mut cur, Batch { set: s, examples: Vec::new() }));
                used = 0;
            }
            cur.examples.push(i);
            used += c;
        }
        if !cur.examples.is_empty() {
            out.push(cur);
        }
    }
    out.shuffle(rng);
    out
}

fn example_rng(seed: u64, update: usize, k: usize) -> ChaCha8Rng {
    let mix = seed ^ (update as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (k as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    ChaCha8Rng::seed_from_u64(mix)
}

fn masks(model: &Model, sets: &[ParallelSet]) -> Result<Vec<Vec<usize>>> {
    sets.iter()
        .map(|s| {
            if !model.vocab.has_language(&s.src_lang) {
                return Err(Error::Config(format!("source language `{}` is not in the vocabulary", s.src_lang)));
            }
            Ok(model.vocab.target_mask(&s.tgt_lang).map_err(|e| Error::Config(e.to_string()))?.allowed)
        })
        .collect()
}

fn head_target<'a>(model: &Model, cfg: &TrainConfig, allowed: &'a [usize], score_vmf: bool) -> HeadTarget<'a> {
    match model.config.head {
        HeadKind::Softmax => HeadTarget::Softmax { allowed, label_smoothing: cfg.label_smoothing },
        HeadKind::Vmf => HeadTarget::Vmf { lambda: cfg.lambda_vmf, allowed: score_vmf.then_some(allowed) },
    }
}

/// Teacher-forced loss and token accuracy, without dropout.
pub fn evaluate(model: &Model, sets: &[ParallelSet], cfg: &TrainConfig) -> Result<EvalStats> {
    let masks = masks(model, sets)?;
    let rows = vec![false; model.vocab.len()];
    let net = model.net(&rows);
    let (mut loss, mut tokens, mut correct) = (0.0, 0, 0);
    for (set, allowed) in sets.iter().zip(&masks) {
        let target = head_target(model, cfg, allowed, true);
        let outs = exec::map(&set.examples, |ex| net.example_loss(ex, &target, None, false));
        for o in outs {
            let o = o?;
            loss += o.loss as f64;
            tokens += o.tokens;
            correct += o.correct;
        }
    }
    if tokens == 0 {
        return Err(Error::Evaluation("no evaluation tokens".into()));
    }
    Ok(EvalStats { loss_per_token: loss / tokens as f64, accuracy: correct as f64 / tokens as f64, tokens })
}

/// Run one optimizer update over `batches`. Returns (summed loss, target tokens, learning rate).
pub fn update_step(
    model: &mut Model,
    sets: &[ParallelSet],
    masks: &[Vec<usize>],
    batches: &[Batch],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    update: usize,
) -> Result<(f64, usize, f64)> {
    let rows = model.trainable_rows();
    let mut grads = Gradients::empty(model.params.len());
    let (mut loss, mut tokens) = (0.0, 0);
    {
        let net = model.net(&rows);
        let mut k = 0;
        for b in batches {
            let set = &sets[b.set];
            let target = head_target(model, cfg, &masks[b.set], false);
            let base = k;
            let outs: Vec<Result<ExampleOutput<f32>>> = exec::map_range(b.examples.len(), |j| {
                let mut rng = example_rng(cfg.seed, update, base + j);
                net.example_loss(&set.examples[b.examples[j]], &target, Some(&mut rng), true)
            });
            k += b.examples.len();
            for o in outs {
                let o = o?;
                loss += o.loss as f64;
                tokens += o.tokens;
                grads.merge(o.grads.expect("gradients requested"));
            }
        }
    }
    grads.scale(1.0 / tokens.max(1) as f32);
    let d = model.config.d_model;
    let lr = apply_update(&mut model.params, &mut model.vocab.embedding, &grads, state, &cfg.optimizer, d)?;
    Ok((loss, tokens, lr))
}

pub fn train(model: &mut Model, train_sets: &[ParallelSet], dev_sets: &[ParallelSet], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_sets.iter().all(|s| s.examples.is_empty()) {
        return Err(Error::Config("empty training corpus".into()));
    }
    let train_masks = masks(model, train_sets)?;
    let use_dev = dev_sets.iter().any(|s| !s.examples.is_empty());
    if use_dev {
        masks(model, dev_sets)?;
    }
    let special_rows = model.vocab.special_indices();
    let snapshot = |m: &Model| (m.params.clone(), special_rows.iter().map(|&r| m.vocab.embedding.row(r).to_vec()).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new();
    let mut queue: Vec<Batch> = Vec::new();
    let mut trace = Vec::new();
    let mut best: Option<(f64, _)> = None;
    let mut bad = 0;
    let mut stopped_early = false;
    let mut update = 0;
    while update < cfg.max_updates {
        let mut step_batches = Vec::with_capacity(cfg.accumulation);
        while step_batches.len() < cfg.accumulation {
            if queue.is_empty() {
                queue = make_batches(train_sets, cfg.batch_tokens, &mut rng);
                queue.reverse();
            }
            step_batches.push(queue.pop().expect("non-empty queue"));
        }
        update += 1;
        let (loss, tokens, lr) = update_step(model, train_sets, &train_masks, &step_batches, cfg, &mut state, update)?;
        let train_loss = loss / tokens.max(1) as f64;
        let eval_now = use_dev && update % cfg.dev_every == 0;
        if eval_now || update % cfg.log_every.max(1) == 0 || update == cfg.max_updates {
            let dev = if eval_now { Some(evaluate(model, dev_sets, cfg)?) } else { None };
            log::info!(
                "update {update} lr {lr:.3e} train {train_loss:.4}{}",
                dev.map(|d| format!(" dev {:.4} acc {:.3}", d.loss_per_token, d.accuracy)).unwrap_or_default()
            );
            trace.push(TraceEntry {
                update,
                lr,
                train_loss,
                dev_loss: dev.map(|d| d.loss_per_token),
                dev_accuracy: dev.map(|d| d.accuracy),
            });
            if let Some(d) = dev {
                if best.as_ref().is_none_or(|(b, _)| d.loss_per_token < *b) {
                    best = Some((d.loss_per_token, snapshot(model)));
                    bad = 0;
                } else {
                    bad += 1;
                    if cfg.patience.is_some_and(|p| bad >= p) {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    let best_dev_loss = best.as_ref().map(|(l, _)| *l);
    if let Some((_, (params, rows))) = best {
        model.params = params;
        for (&r, v) in special_rows.iter().zip(rows) {
            model.vocab.embedding.row_mut(r).copy_from_slice(&v);
        }
    }
    Ok(TrainReport { updates: update, trace, best_dev_loss, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize, m: usize) -> Example {
        Example { src: vec![5; n], tgt: vec![6; m], tag: 4 }
    }

    #[test]
    fn batches_respect_budget_and_homogeneity() {
        let sets = vec![
            ParallelSet { src_lang: "a".into(), tgt_lang: "b".into(), examples: (1..20).map(|n| ex(n, 3)).collect() },
            ParallelSet { src_lang: "b".into(), tgt_lang: "a".into(), examples: (1..20).map(|n| ex(3, n)).collect() },
        ];
        let batches = make_batches(&sets, 24, &mut ChaCha8Rng::seed_from_u64(1));
        let mut seen = vec![vec![false; 19]; 2];
        for b in &batches {
            let cost: usize = b.examples.iter().map(|&i| batch_cost(&sets[b.set].examples[i])).sum();
            assert!(cost <= 24 || b.examples.len() == 1);
            for &i in &b.examples {
                assert!(!seen[b.set][i]);
                seen[b.set][i] = true;
            }
        }
        assert!(seen.iter().flatten().all(|&s| s));
    }
}
