//! Iterative back-translation with parity freezing.
//!
//! Iteration `i` translates monolingual text with the current model, puts the
//! synthetic side on the source, and fine-tunes with the encoder frozen when
//! `i` is odd and the decoder blocks frozen when `i` is even. Cross-attention,
//! the output head and the special rows stay trainable throughout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{chrf_pp, MetricConfig};
use crate::model::{train, Group, Model, ParallelSet, TrainConfig, TrainReport};
use crate::translate::{beam_search, surface_words, TranslationRequest};
use crate::vocab::UNK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtPlan {
    pub new_language: String,
    pub partners: Vec<String>,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Beam for synthetic data generation.
    pub beam: usize,
    /// Beam for dev/test scoring.
    pub eval_beam: usize,
    /// Cap on monolingual lines translated per language and iteration.
    pub mono_limit: Option<usize>,
    /// Synthetic pairs per direction held back for early stopping.
    pub synthetic_dev: usize,
    /// Fine-tune every iteration from the model the plan started with.
    pub restart_from_base: bool,
    pub train: TrainConfig,
}

impl BtPlan {
    pub fn new(new_language: &str, partners: &[&str]) -> Self {
        Self {
            new_language: new_language.into(),
            partners: partners.iter().map(|p| p.to_string()).collect(),
            iterations: 2,
            steps_per_iteration: 1000,
            beam: 5,
            eval_beam: 1,
            mono_limit: None,
            synthetic_dev: 100,
            restart_from_base: false,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self, model: &Model, data: &BtData) -> Result<()> {
        if self.iterations == 0 || self.steps_per_iteration == 0 || self.beam == 0 || self.eval_beam == 0 {
            return Err(Error::Config("iterations, steps_per_iteration and beam sizes must be positive".into()));
        }
        if self.partners.is_empty() || self.partners.contains(&self.new_language) {
            return Err(Error::Config("partners must be non-empty and exclude the new language".into()));
        }
        for l in self.languages() {
            if model.vocab.tag(l).is_none() {
                return Err(Error::Config(format!("model cannot decode into `{l}`")));
            }
            if data.mono.get(l).is_none_or(|m| m.is_empty()) {
                return Err(Error::Config(format!("no monolingual corpus for `{l}`")));
            }
        }
        self.train.validate()
    }

    pub fn languages(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.new_language).chain(&self.partners)
    }

    /// Both directions between the new language and each partner, new→partner first.
    pub fn directions(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for p in &self.partners {
            out.push((self.new_language.clone(), p.clone()));
            out.push((p.clone(), self.new_language.clone()));
        }
        out
    }
}

/// Groups frozen (besides the pretrained word rows) in iteration `i`.
pub fn parity_frozen(i: usize) -> Group {
    if i % 2 == 1 {
        Group::Encoder
    } else {
        Group::Decoder
    }
}

/// A held-out parallel set used only for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

#[derive(Debug, Clone, Default)]
pub struct BtData {
    pub mono: BTreeMap<String, Vec<Vec<String>>>,
    pub tests: Vec<TestSet>,
}

/// Back-translated pairs: synthetic `src_lang` text, original `tgt_lang` text.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub filtered: usize,
}

/// Translate `mono` (in `lang_a`) into `lang_b` and pair each output with its input.
/// Empty and all-UNK outputs are dropped.
pub fn generate_synthetic(model: &Model, mono: &[Vec<String>], lang_a: &str, lang_b: &str, beam: usize) -> Result<SyntheticCorpus> {
    for l in [lang_a, lang_b] {
        if !model.vocab.has_language(l) {
            return Err(Error::Config(format!("language `{l}` is not in the model vocabulary")));
        }
    }
    let req = TranslationRequest::new(lang_a, lang_b, mono.to_vec()).with_beam(beam);
    let hyps = beam_search(model, &req)?;
    let mut pairs = Vec::with_capacity(mono.len());
    let mut filtered = 0;
    for (h, orig) in hyps.iter().zip(mono) {
        match h {
            Some(h) if h.content().iter().any(|&t| t != UNK) => pairs.push((surface_words(model, h), orig.clone())),
            _ => filtered += 1,
        }
    }
    log::info!("{lang_a}→{lang_b}: {} synthetic pairs, {filtered} filtered", pairs.len());
    Ok(SyntheticCorpus { src_lang: lang_b.into(), tgt_lang: lang_a.into(), pairs, filtered })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub direction: String,
    pub test_set: String,
    pub chrfpp: f64,
}

/// Score every test set whose direction the plan covers.
pub fn score_tests(model: &Model, plan: &BtPlan, tests: &[TestSet], iteration: usize) -> Result<Vec<MetricRow>> {
    let dirs: BTreeSet<(String, String)> = plan.directions().into_iter().collect();
    let mut rows = Vec::new();
    for t in tests.iter().filter(|t| dirs.contains(&(t.src_lang.clone(), t.tgt_lang.clone()))) {
        let req = TranslationRequest::new(&t.src_lang, &t.tgt_lang, t.pairs.iter().map(|p| p.0.clone()).collect()).with_beam(plan.eval_beam);
        let hyps = beam_search(model, &req)?;
        let hyp: Vec<String> =
            hyps.iter().map(|h| h.as_ref().map(|h| surface_words(model, h).join(" ")).unwrap_or_default()).collect();
        let refs: Vec<String> = t.pairs.iter().map(|p| p.1.join(" ")).collect();
        rows.push(MetricRow {
            iteration,
            direction: format!("{}-{}", t.src_lang, t.tgt_lang),
            test_set: t.name.clone(),
            chrfpp: chrf_pp(&hyp, &refs, &MetricConfig::chrfpp())?.score,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub model: Model,
    pub iteration: usize,
    pub frozen: Group,
    pub synthetic: Vec<SyntheticCorpus>,
    pub report: Option<TrainReport>,
    /// Set when adaptation failed and the input model was kept.
    pub aborted: Option<String>,
    pub metrics: Vec<MetricRow>,
}

fn to_sets(model: &Model, corpora: &[SyntheticCorpus], dev: usize) -> Result<(Vec<ParallelSet>, Vec<ParallelSet>)> {
    let mut train_sets = Vec::new();
    let mut dev_sets = Vec::new();
    for c in corpora {
        let examples = c.pairs.iter().map(|(s, t)| model.example(&c.src_lang, s, &c.tgt_lang, t)).collect::<Result<Vec<_>>>()?;
        let cut = dev.min(examples.len() / 2);
        let (d, t) = examples.split_at(cut);
        dev_sets.push(ParallelSet { src_lang: c.src_lang.clone(), tgt_lang: c.tgt_lang.clone(), examples: d.to_vec() });
        train_sets.push(ParallelSet { src_lang: c.src_lang.clone(), tgt_lang: c.tgt_lang.clone(), examples: t.to_vec() });
    }
    Ok((train_sets, dev_sets))
}

/// One back-translation round starting from `model`.
pub fn run_iteration(model: &Model, plan: &BtPlan, data: &BtData, iteration: usize) -> Result<IterationOutcome> {
    if iteration == 0 {
        return Err(Error::Config("iterations are numbered from 1".into()));
    }
    plan.validate(model, data)?;
    let mut synthetic = Vec::new();
    for (a, b) in plan.directions() {
        let mono = &data.mono[&a];
        let n = plan.mono_limit.unwrap_or(mono.len()).min(mono.len());
        synthetic.push(generate_synthetic(model, &mono[..n], &a, &b, plan.beam)?);
    }
    let (train_sets, dev_sets) = to_sets(model, &synthetic, plan.synthetic_dev)?;

    let frozen = parity_frozen(iteration);
    let mut next = model.clone();
    next.set_frozen(&[Group::FrozenEmbeddings, frozen].into_iter().collect());
    let cfg = TrainConfig {
        max_updates: plan.steps_per_iteration,
        seed: plan.train.seed.wrapping_add(iteration as u64),
        ..plan.train.clone()
    };
    let (report, aborted) = match train(&mut next, &train_sets, &dev_sets, &cfg) {
        Ok(r) => (Some(r), None),
        Err(e @ (Error::Training { .. } | Error::Numerical(_) | Error::Diverged { .. })) => {
            log::warn!("iteration {iteration} aborted, keeping the previous model: {e}");
            next = model.clone();
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    next.set_frozen(&model.params.frozen().clone());
    let metrics = score_tests(&next, plan, &data.tests, iteration)?;
    Ok(IterationOutcome { model: next, iteration, frozen, synthetic, report, aborted, metrics })
}

#[derive(Debug, Clone)]
pub struct PlanReport {
    pub model: Model,
    /// Scores of the starting model.
    pub baseline: Vec<MetricRow>,
    /// One row per (iteration, direction, test set).
    pub table: Vec<MetricRow>,
    pub iterations: Vec<IterationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub frozen: String,
    pub synthetic_pairs: usize,
    pub filtered: usize,
    pub updates: usize,
    pub aborted: Option<String>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub decoder_checksum_before: String,
    pub decoder_checksum_after: String,
}

pub fn run_plan(model: &Model, plan: &BtPlan, data: &BtData) -> Result<PlanReport> {
    plan.validate(model, data)?;
    let baseline = score_tests(model, plan, &data.tests, 0)?;
    let mut current = model.clone();
    let mut table = Vec::new();
    let mut iterations = Vec::new();
    for i in 1..=plan.iterations {
        let start = if plan.restart_from_base { model } else { &current };
        let (enc, dec) = (start.group_checksum(Group::Encoder), start.group_checksum(Group::Decoder));
        let out = run_iteration(start, plan, data, i)?;
        iterations.push(IterationSummary {
            iteration: i,
            frozen: out.frozen.name().into(),
            synthetic_pairs: out.synthetic.iter().map(|s| s.pairs.len()).sum(),
            filtered: out.synthetic.iter().map(|s| s.filtered).sum(),
            updates: out.report.as_ref().map_or(0, |r| r.updates),
            aborted: out.aborted.clone(),
            encoder_checksum_before: enc,
            encoder_checksum_after: out.model.group_checksum(Group::Encoder),
            decoder_checksum_before: dec,
            decoder_checksum_after: out.model.group_checksum(Group::Decoder),
        });
        table.extend(out.metrics);
        current = out.model;
    }
    Ok(PlanReport { model: current, baseline, table, iterations })
}

/// Tab-separated metric table with a header row.
pub fn metric_table_tsv(rows: &[MetricRow]) -> String {
    let mut s = String::from("iteration\tdirection\ttest_set\tchrfpp\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{:.4}\n", r.iteration, r.direction, r.test_set, r.chrfpp));
    }
    s
}
