//! End-to-end runs on a synthetic family: embeddings per language, hub
//! alignment, a base model over the seen languages, zero-shot plug-in of the
//! held-out one.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_to_hub, AlignConfig, BilingualDictionary, HubAlignment};
use crate::embeddings::{train_skipgram, EmbeddingTable, SkipgramConfig, SubwordBank};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{chrf_pp, MetricConfig};
use super::bt::{BtData, BtPlan, TestSet};
use crate::model::{Model, ParallelSet, Schedule, TrainConfig, TrainReport, TransformerConfig};
use crate::synthlang::{make_family, BaseCorpus, FamilyOptions, GrammarSpec, LanguageDerivation, Reorder, Split, SuffixRule, SynthFamily};
use crate::translate::{beam_search, mapped_language_vocab, plug_in_language, surface_words, PlugIn, TranslationRequest};
use crate::vocab::merge;

/// Surface shape of one derived language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageShape {
    pub id: String,
    /// Reverse word order inside windows of this size; 1 keeps the base order.
    pub window: usize,
    pub suffix: Option<SuffixRule>,
    /// Synonym swap rate; synonyms exist for a third of the lexicon.
    pub noise: f64,
}

impl LanguageShape {
    pub fn renaming(id: &str) -> Self {
        Self { id: id.into(), window: 1, suffix: None, noise: 0.0 }
    }

    fn derive(&self, base: &BaseCorpus, seed: u64) -> LanguageDerivation {
        let mut d = if self.noise > 0.0 {
            LanguageDerivation::distant(&self.id, base, seed, self.window, self.noise)
        } else {
            LanguageDerivation::renaming(&self.id, base, seed)
        };
        d.reorder = Reorder::reverse(self.window.max(1));
        d.suffix_rules = self.suffix.iter().cloned().collect();
        d
    }
}

/// Seen languages (pivot first) and one held-out language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilySetup {
    pub grammar: GrammarSpec,
    pub family: FamilyOptions,
    pub pivot: String,
    pub seen: Vec<LanguageShape>,
    pub held_out: LanguageShape,
    pub skipgram: SkipgramConfig,
    pub renormalize: bool,
}

impl Default for FamilySetup {
    fn default() -> Self {
        Self::desk(1, 32)
    }
}

impl FamilySetup {
    /// Pivot `sa`; `sb` differs from it only in surface forms; `sc` reverses
    /// word triples and marks every third word; held-out `sd` reverses pairs,
    /// marks every fourth word and swaps in synonyms.
    pub fn desk(seed: u64, dim: usize) -> Self {
        Self {
            grammar: GrammarSpec { seed, vocab_size: 120, min_len: 4, max_len: 10, topic_count: 6, sentences: 30_000 },
            family: FamilyOptions { dev: 150, test: 150, mono_fraction: 0.8, unseen: Some("sd".into()) },
            pivot: "sa".into(),
            seen: vec![
                LanguageShape::renaming("sa"),
                LanguageShape::renaming("sb"),
                LanguageShape { id: "sc".into(), window: 3, suffix: Some(SuffixRule { every: 3, offset: 1, suffix: "s".into() }), noise: 0.0 },
            ],
            held_out: LanguageShape {
                id: "sd".into(),
                window: 2,
                suffix: Some(SuffixRule { every: 4, offset: 0, suffix: "n".into() }),
                noise: 0.1,
            },
            skipgram: SkipgramConfig {
                dim,
                window: 3,
                negatives: 5,
                epochs: 5,
                min_count: 3,
                min_n: 3,
                max_n: 5,
                buckets: 1 << 14,
                seed,
                ..SkipgramConfig::default()
            },
            renormalize: true,
        }
    }

    pub fn seen_ids(&self) -> Vec<String> {
        self.seen.iter().map(|s| s.id.clone()).collect()
    }

    pub fn languages(&self) -> Vec<String> {
        self.seen.iter().chain(std::iter::once(&self.held_out)).map(|s| s.id.clone()).collect()
    }

    pub fn build_family(&self) -> Result<SynthFamily> {
        let base = crate::synthlang::generate_base_corpus(&self.grammar)?;
        let seed = self.grammar.seed;
        let mut ds: Vec<LanguageDerivation> =
            self.seen.iter().enumerate().map(|(i, s)| s.derive(&base, seed.wrapping_mul(31).wrapping_add(i as u64 + 1))).collect();
        ds.push(self.held_out.derive(&base, seed.wrapping_mul(31) ^ 0xd));
        make_family(&self.grammar, &ds, &FamilyOptions { unseen: Some(self.held_out.id.clone()), ..self.family.clone() })
    }
}

/// Monolingual embeddings for every language of the family.
pub fn embed_languages(
    family: &SynthFamily,
    langs: &[String],
    cfg: &SkipgramConfig,
) -> Result<BTreeMap<String, (EmbeddingTable, SubwordBank)>> {
    let tables = exec::map(langs, |l| {
        let cfg = SkipgramConfig { language: l.clone(), ..cfg.clone() };
        train_skipgram(&family.mono_sentences(l), &cfg)
    });
    langs.iter().cloned().zip(tables).map(|(l, t)| Ok((l, t?))).collect()
}

/// Gold dictionary of `lang` into `pivot`.
pub fn dictionary(family: &SynthFamily, lang: &str, pivot: &str) -> Result<BilingualDictionary> {
    let pairs = family
        .gold_dictionaries
        .get(&(lang.to_string(), pivot.to_string()))
        .ok_or_else(|| Error::Config(format!("no dictionary {lang}→{pivot}")))?;
    BilingualDictionary::new(lang, pivot, pairs.clone())
}

pub fn align_languages(
    family: &SynthFamily,
    tables: &BTreeMap<String, (EmbeddingTable, SubwordBank)>,
    langs: &[String],
    pivot: &str,
    cfg: &AlignConfig,
) -> Result<HubAlignment> {
    let mut t = BTreeMap::new();
    let mut d = BTreeMap::new();
    for l in langs {
        let (table, _) = tables.get(l).ok_or_else(|| Error::Config(format!("no embeddings for `{l}`")))?;
        t.insert(l.clone(), table.clone());
        if l != pivot {
            d.insert(l.clone(), dictionary(family, l, pivot)?);
        }
    }
    align_to_hub(&t, &d, pivot, cfg)
}

/// Merged vocabulary of `langs`, each restricted to its training-side text.
pub fn base_vocab(
    family: &SynthFamily,
    tables: &BTreeMap<String, (EmbeddingTable, SubwordBank)>,
    hub: &HubAlignment,
    langs: &[String],
    renormalize: bool,
) -> Result<crate::vocab::MultiVocab> {
    let per = langs
        .iter()
        .map(|l| {
            let (table, bank) = &tables[l];
            let mut corpus = family.sentences(l, Split::Train);
            corpus.extend(family.mono_sentences(l));
            mapped_language_vocab(table, Some(bank), hub.map(l)?, Some(&corpus), l, renormalize)
        })
        .collect::<Result<Vec<_>>>()?;
    merge(&per)
}

/// Indexed parallel data for `src → tgt` on `split`, at most `limit` pairs.
pub fn parallel_set(model: &Model, family: &SynthFamily, src: &str, tgt: &str, split: Split, limit: Option<usize>) -> Result<ParallelSet> {
    let pairs = family.parallel(src, tgt, split);
    let n = limit.unwrap_or(pairs.len()).min(pairs.len());
    let examples = pairs[..n].iter().map(|(s, t)| model.example(src, s, tgt, t)).collect::<Result<_>>()?;
    Ok(ParallelSet { src_lang: src.into(), tgt_lang: tgt.into(), examples })
}

/// All ordered pairs among `langs`.
pub fn all_pairs(langs: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for a in langs {
        for b in langs {
            if a != b {
                out.push((a.clone(), b.clone()));
            }
        }
    }
    out
}

/// chrF++ of translating `pairs` from `src` to `tgt`.
pub fn chrf_on(model: &Model, src: &str, tgt: &str, pairs: &[(Vec<String>, Vec<String>)], beam: usize) -> Result<f64> {
    let req = TranslationRequest::new(src, tgt, pairs.iter().map(|p| p.0.clone()).collect()).with_beam(beam);
    let hyps = beam_search(model, &req)?;
    let hyp: Vec<String> = hyps.iter().map(|h| h.as_ref().map(|h| surface_words(model, h).join(" ")).unwrap_or_default()).collect();
    let refs: Vec<String> = pairs.iter().map(|p| p.1.join(" ")).collect();
    Ok(chrf_pp(&hyp, &refs, &MetricConfig::chrfpp())?.score)
}

/// Everything a zero-shot run produces.
pub struct BaseRun {
    pub family: SynthFamily,
    pub tables: BTreeMap<String, (EmbeddingTable, SubwordBank)>,
    pub hub: HubAlignment,
    pub model: Model,
    pub report: TrainReport,
}

/// Embed, align and train a base model on every ordered pair of seen languages.
pub fn train_base(setup: &FamilySetup, tcfg: &TransformerConfig, train: &TrainConfig, pairs_per_direction: Option<usize>) -> Result<BaseRun> {
    let family = setup.build_family()?;
    let langs = setup.languages();
    let tables = embed_languages(&family, &langs, &setup.skipgram)?;
    let hub = align_languages(&family, &tables, &langs, &setup.pivot, &AlignConfig { renormalize: setup.renormalize, ..AlignConfig::default() })?;
    let seen = setup.seen_ids();
    let vocab = base_vocab(&family, &tables, &hub, &seen, setup.renormalize)?;
    let mut model = Model::new(tcfg.clone(), vocab, train.seed)?;
    let mut train_sets = Vec::new();
    let mut dev_sets = Vec::new();
    for (a, b) in all_pairs(&seen) {
        train_sets.push(parallel_set(&model, &family, &a, &b, Split::Train, pairs_per_direction)?);
        dev_sets.push(parallel_set(&model, &family, &a, &b, Split::Dev, Some(50))?);
    }
    let report = crate::model::train(&mut model, &train_sets, &dev_sets, train)?;
    Ok(BaseRun { family, tables, hub, model, report })
}

/// Plug the held-out language into `run.model`. With `shuffle`, the word
/// rows are permuted among the language's words (control condition).
pub fn plug_in_held_out(setup: &FamilySetup, run: &BaseRun, shuffle: Option<u64>) -> Result<Model> {
    let l = &setup.held_out.id;
    let (table, bank) = &run.tables[l];
    let map = run.hub.map(l)?;
    let corpus = run.family.mono_sentences(l);
    let model = plug_in_language(
        &run.model,
        table,
        map,
        &PlugIn { language: l, pivot: &setup.pivot, renormalize: setup.renormalize, corpus: Some(&corpus), bank: Some(bank), add_tag: true },
    )?;
    let Some(seed) = shuffle else { return Ok(model) };
    let mut model = model;
    let idx = model.vocab.language_indices(l).expect("just added").to_vec();
    let mut perm = idx.clone();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rows: Vec<Vec<f32>> = perm.iter().map(|&i| model.vocab.embedding.row(i).to_vec()).collect();
    for (&i, r) in idx.iter().zip(rows) {
        model.vocab.embedding.row_mut(i).copy_from_slice(&r);
    }
    Ok(model)
}

/// Base-model training settings used for the desk-scale family.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    let mut t = TrainConfig { max_updates: 2000, batch_tokens: 600, dev_every: 250, seed, ..TrainConfig::default() };
    t.optimizer.schedule = Schedule::Noam { warmup: 400 };
    t.optimizer.learning_rate = 2.0;
    t
}

/// Back-translation between the held-out language and the pivot: short,
/// gentle fine-tuning rounds on a slice of the monolingual text.
pub fn desk_bt_plan(setup: &FamilySetup, seed: u64) -> BtPlan {
    let mut plan = BtPlan::new(&setup.held_out.id, &[setup.pivot.as_str()]);
    plan.steps_per_iteration = 500;
    plan.mono_limit = Some(2000);
    plan.beam = 1;
    plan.train = TrainConfig { batch_tokens: 600, dev_every: 100, seed, ..TrainConfig::default() };
    plan.train.optimizer.schedule = Schedule::Noam { warmup: 200 };
    plan.train.optimizer.learning_rate = 0.3;
    plan
}

/// Monolingual text of every plan language and the dev sets of both directions.
pub fn bt_data(family: &SynthFamily, plan: &BtPlan) -> BtData {
    let mut data = BtData::default();
    for l in plan.languages() {
        data.mono.insert(l.clone(), family.mono_sentences(l));
    }
    for (a, b) in plan.directions() {
        data.tests.push(TestSet { name: "dev".into(), src_lang: a.clone(), tgt_lang: b.clone(), pairs: family.parallel(&a, &b, Split::Dev) });
    }
    data
}
