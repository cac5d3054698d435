//! Synthetic language families with known ground-truth lexical mappings.
//!
//! A base corpus is sampled from a topic model over a small lexicon with a
//! fixed function-word skeleton. Each derived language renames the lexicon
//! through a bijection and optionally permutes local word order, attaches
//! position-conditioned suffixes and swaps in synonyms. Everything is a pure
//! function of the specs and their seeds.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

const MIN_LEXEME_COUNT: usize = 5;
const MAX_RESAMPLES: u64 = 32;
const SPLIT_SALT: u64 = 0x5011_7000;
const SUCCESSORS: usize = 3;
const FOLLOW_RATE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub seed: u64,
    /// Number of base lexemes, function words included.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub topic_count: usize,
    pub sentences: usize,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        Self { seed: 1, vocab_size: 200, min_len: 4, max_len: 12, topic_count: 8, sentences: 20_000 }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::Config(format!("vocab_size must be >= 10, got {}", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence length range {}..{} is invalid",
                self.min_len, self.max_len
            )));
        }
        if self.topic_count == 0 {
            return Err(Error::Config("topic_count must be >= 1".into()));
        }
        if self.sentences == 0 {
            return Err(Error::Config("sentences must be >= 1".into()));
        }
        Ok(())
    }

    fn function_words(&self) -> usize {
        (self.vocab_size / 20).clamp(3, 12)
    }
}

/// Base corpus: lexicon surfaces plus sentences as lexeme ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCorpus {
    pub lexicon: Vec<String>,
    pub sentences: Vec<Vec<u32>>,
}

impl BaseCorpus {
    pub fn render(&self) -> Vec<Vec<String>> {
        self.sentences
            .iter()
            .map(|s| s.iter().map(|&w| self.lexicon[w as usize].clone()).collect())
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.lexicon.len()];
        for s in &self.sentences {
            for &w in s {
                counts[w as usize] += 1;
            }
        }
        counts
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "kr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Draw `n` distinct pseudo-words of 2–3 syllables, avoiding `taken`.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty weights");
    let x = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

fn cumulate(w: &[f64]) -> Vec<f64> {
    w.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

pub fn generate_base_corpus(spec: &GrammarSpec) -> Result<BaseCorpus> {
    spec.validate()?;
    let mut name_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1e81);
    let lexicon = pseudo_words(spec.vocab_size, &mut name_rng, &mut HashSet::new());

    let n_func = spec.function_words();
    let content: Vec<u32> = (n_func as u32..spec.vocab_size as u32).collect();
    let mut topics: Vec<Vec<u32>> = vec![Vec::new(); spec.topic_count];
    for (i, &w) in content.iter().enumerate() {
        topics[i % spec.topic_count].push(w);
    }
    let topic_cum: Vec<Vec<f64>> = topics.iter().map(|t| cumulate(&zipf_weights(t.len(), 0.7))).collect();
    // Each content word prefers a few successors from its own topic, so words
    // of one topic are told apart by their neighbours and not only by frequency.
    let mut succ_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ecc_e550);
    let mut successors: Vec<Vec<u32>> = vec![Vec::new(); spec.vocab_size];
    for t in &topics {
        for &w in t {
            successors[w as usize] = (0..SUCCESSORS).map(|_| t[succ_rng.random_range(0..t.len())]).collect();
        }
    }

    for attempt in 0..MAX_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ attempt);
        let mut sentences = Vec::with_capacity(spec.sentences);
        for _ in 0..spec.sentences {
            let topic = rng.random_range(0..spec.topic_count);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut s = Vec::with_capacity(len);
            let mut prev: Option<u32> = None;
            for pos in 0..len {
                if pos % 3 == 1 {
                    // skeleton slot: two candidate function words per (slot, topic)
                    let slot = pos / 3 + topic;
                    let pick = (slot * 2 + rng.random_range(0..2)) % n_func;
                    s.push(pick as u32);
                    continue;
                }
                let w = match prev {
                    Some(p) if rng.random::<f64>() < FOLLOW_RATE && !successors[p as usize].is_empty() => {
                        let succ = &successors[p as usize];
                        succ[rng.random_range(0..succ.len())]
                    }
                    _ if rng.random::<f64>() < 0.85 && !topics[topic].is_empty() => {
                        topics[topic][sample_weighted(&mut rng, &topic_cum[topic])]
                    }
                    _ => content[rng.random_range(0..content.len())],
                };
                s.push(w);
                prev = Some(w);
            }
            sentences.push(s);
        }
        let corpus = BaseCorpus { lexicon: lexicon.clone(), sentences };
        if corpus.counts().iter().all(|&c| c >= MIN_LEXEME_COUNT) {
            return Ok(corpus);
        }
    }
    Err(Error::Config(format!(
        "could not reach {MIN_LEXEME_COUNT} occurrences per lexeme with {} sentences over {} lexemes",
        spec.sentences, spec.vocab_size
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixRule {
    /// Applies at positions `p` with `p % every == offset` (after reordering).
    pub every: usize,
    pub offset: usize,
    pub suffix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reorder {
    pub window: usize,
    /// Permutation of `0..window` applied to each full window; a trailing partial window is left as is.
    pub pattern: Vec<usize>,
}

impl Reorder {
    pub fn identity() -> Self {
        Self { window: 1, pattern: vec![0] }
    }

    pub fn reverse(window: usize) -> Self {
        Self { window, pattern: (0..window).rev().collect() }
    }

    fn validate(&self) -> Result<()> {
        let mut sorted = self.pattern.clone();
        sorted.sort_unstable();
        if self.window == 0 || sorted != (0..self.window).collect::<Vec<_>>() {
            return Err(Error::Config(format!("reorder pattern {:?} is not a permutation of 0..{}", self.pattern, self.window)));
        }
        Ok(())
    }

    fn apply<T: Clone>(&self, s: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(s.len());
        let mut chunks = s.chunks_exact(self.window);
        for chunk in &mut chunks {
            out.extend(self.pattern.iter().map(|&p| chunk[p].clone()));
        }
        out.extend_from_slice(chunks.remainder());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDerivation {
    pub language: String,
    /// Surface form per base lexeme id; must be a bijection.
    pub substitution: Vec<String>,
    pub suffix_rules: Vec<SuffixRule>,
    pub reorder: Reorder,
    pub noise_rate: f64,
    /// Alternative surface for some lexemes, used by noise swaps.
    pub synonyms: BTreeMap<u32, String>,
    pub seed: u64,
}

impl LanguageDerivation {
    /// Same surfaces, same order.
    pub fn identity(language: &str, base: &BaseCorpus) -> Self {
        Self {
            language: language.into(),
            substitution: base.lexicon.clone(),
            suffix_rules: Vec::new(),
            reorder: Reorder::identity(),
            noise_rate: 0.0,
            synonyms: BTreeMap::new(),
            seed: 0,
        }
    }

    /// A "close" language: fresh surface for every lexeme, nothing else.
    pub fn renaming(language: &str, base: &BaseCorpus, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken: HashSet<String> = base.lexicon.iter().cloned().collect();
        let substitution = pseudo_words(base.lexicon.len(), &mut rng, &mut taken);
        Self { substitution, seed, ..Self::identity(language, base) }
    }

    /// A "distant" language: renaming plus windowed reordering, a suffix
    /// rule and synonym noise on a third of the lexicon.
    pub fn distant(language: &str, base: &BaseCorpus, seed: u64, window: usize, noise_rate: f64) -> Self {
        let mut d = Self::renaming(language, base, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d15_7a47);
        let mut taken: HashSet<String> = base.lexicon.iter().chain(&d.substitution).cloned().collect();
        let with_synonym: Vec<u32> = (0..base.lexicon.len() as u32).filter(|i| i % 3 == 0).collect();
        let syn = pseudo_words(with_synonym.len(), &mut rng, &mut taken);
        d.synonyms = with_synonym.into_iter().zip(syn).collect();
        d.reorder = Reorder::reverse(window.max(1));
        d.suffix_rules = vec![SuffixRule { every: 4, offset: 0, suffix: "n".into() }];
        d.noise_rate = noise_rate;
        d
    }

    fn validate(&self, lexicon_len: usize) -> Result<()> {
        if self.substitution.len() != lexicon_len {
            return Err(Error::Config(format!(
                "substitution for `{}` covers {} of {} lexemes",
                self.language,
                self.substitution.len(),
                lexicon_len
            )));
        }
        let distinct: HashSet<&String> = self.substitution.iter().collect();
        if distinct.len() != self.substitution.len() || self.substitution.iter().any(String::is_empty) {
            return Err(Error::Config(format!("substitution for `{}` is not a bijection", self.language)));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.suffix_rules.iter().any(|r| r.every == 0) {
            return Err(Error::Config("suffix rule with every = 0".into()));
        }
        self.reorder.validate()
    }

    fn derive_sentence(&self, s: &[u32], index: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let words: Vec<String> = s
            .iter()
            .map(|&w| {
                if self.noise_rate > 0.0 {
                    if let Some(syn) = self.synonyms.get(&w) {
                        if rng.random::<f64>() < self.noise_rate {
                            return syn.clone();
                        }
                    }
                }
                self.substitution[w as usize].clone()
            })
            .collect();
        let mut words = self.reorder.apply(&words);
        for (pos, w) in words.iter_mut().enumerate() {
            for rule in &self.suffix_rules {
                if pos % rule.every == rule.offset {
                    w.push_str(&rule.suffix);
                }
            }
        }
        words
    }
}

pub type WordPairs = Vec<(String, String)>;

/// Derive a corpus and its gold dictionary `(derived surface, base surface)`.
pub fn derive_language(base: &BaseCorpus, d: &LanguageDerivation) -> Result<(Vec<Vec<String>>, WordPairs)> {
    d.validate(base.lexicon.len())?;
    let corpus = base.sentences.iter().enumerate().map(|(i, s)| d.derive_sentence(s, i)).collect();
    let dict = d.substitution.iter().cloned().zip(base.lexicon.iter().cloned()).collect();
    Ok((corpus, dict))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOptions {
    pub dev: usize,
    pub test: usize,
    /// Fraction of the train split each language keeps as monolingual text,
    /// drawn independently per language so monolingual corpora are not parallel.
    pub mono_fraction: f64,
    /// Language whose parallel data must never be emitted.
    pub unseen: Option<String>,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self { dev: 200, test: 200, mono_fraction: 0.8, unseen: None }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFamily {
    pub base: BaseCorpus,
    pub derivations: Vec<LanguageDerivation>,
    /// Derived corpus per language, aligned with `base.sentences`.
    pub languages: BTreeMap<String, Vec<Vec<String>>>,
    pub gold_dictionaries: BTreeMap<(String, String), WordPairs>,
    pub splits: BTreeMap<Split, Vec<usize>>,
    pub mono: BTreeMap<String, Vec<usize>>,
    pub unseen: Option<String>,
}

pub fn make_family(spec: &GrammarSpec, derivations: &[LanguageDerivation], opts: &FamilyOptions) -> Result<SynthFamily> {
    if derivations.len() < 2 {
        return Err(Error::Config("a family needs at least two languages".into()));
    }
    let mut seen = BTreeSet::new();
    for d in derivations {
        if !seen.insert(d.language.clone()) {
            return Err(Error::Config(format!("duplicate language id `{}`", d.language)));
        }
        crate::vocab::validate_language_id(&d.language)?;
    }
    if let Some(u) = &opts.unseen {
        if !seen.contains(u) {
            return Err(Error::Config(format!("unseen language `{u}` is not in the family")));
        }
    }
    let base = generate_base_corpus(spec)?;
    if opts.dev + opts.test >= base.sentences.len() {
        return Err(Error::Config("dev + test leave no training sentences".into()));
    }

    let derived = exec::map(derivations, |d| derive_language(&base, d));
    let mut languages = BTreeMap::new();
    let mut to_base = BTreeMap::new();
    for (d, r) in derivations.iter().zip(derived) {
        let (corpus, dict) = r?;
        languages.insert(d.language.clone(), corpus);
        to_base.insert(d.language.clone(), dict);
    }

    let mut gold_dictionaries = BTreeMap::new();
    for a in derivations {
        for b in derivations {
            if a.language == b.language {
                continue;
            }
            let pairs = a.substitution.iter().cloned().zip(b.substitution.iter().cloned()).collect();
            gold_dictionaries.insert((a.language.clone(), b.language.clone()), pairs);
        }
    }

    let mut order: Vec<usize> = (0..base.sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ SPLIT_SALT));
    let mut splits = BTreeMap::new();
    splits.insert(Split::Test, order[..opts.test].to_vec());
    splits.insert(Split::Dev, order[opts.test..opts.test + opts.dev].to_vec());
    splits.insert(Split::Train, order[opts.test + opts.dev..].to_vec());

    let train = &splits[&Split::Train];
    let mut mono = BTreeMap::new();
    for (k, d) in derivations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x6d6f_6e6f + k as u64));
        let mut idx: Vec<usize> = train.iter().copied().filter(|_| rng.random::<f64>() < opts.mono_fraction).collect();
        idx.sort_unstable();
        mono.insert(d.language.clone(), idx);
    }

    Ok(SynthFamily {
        base,
        derivations: derivations.to_vec(),
        languages,
        gold_dictionaries,
        splits,
        mono,
        unseen: opts.unseen.clone(),
    })
}

impl SynthFamily {
    pub fn language_ids(&self) -> Vec<String> {
        self.derivations.iter().map(|d| d.language.clone()).collect()
    }

    pub fn seen_languages(&self) -> Vec<String> {
        self.language_ids().into_iter().filter(|l| Some(l) != self.unseen.as_ref()).collect()
    }

    pub fn sentences(&self, lang: &str, split: Split) -> Vec<Vec<String>> {
        let corpus = &self.languages[lang];
        self.splits[&split].iter().map(|&i| corpus[i].clone()).collect()
    }

    pub fn mono_sentences(&self, lang: &str) -> Vec<Vec<String>> {
        let corpus = &self.languages[lang];
        self.mono[lang].iter().map(|&i| corpus[i].clone()).collect()
    }

    /// Sentence-aligned pairs for `src → tgt` on `split`.
    pub fn parallel(&self, src: &str, tgt: &str, split: Split) -> Vec<(Vec<String>, Vec<String>)> {
        let (s, t) = (&self.languages[src], &self.languages[tgt]);
        self.splits[&split].iter().map(|&i| (s[i].clone(), t[i].clone())).collect()
    }

    fn involves_unseen(&self, a: &str, b: &str) -> bool {
        self.unseen.as_deref().is_some_and(|u| u == a || u == b)
    }

    /// Write the family to `dir` using the plain-text corpus layout.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        let lines = |sents: &[Vec<String>]| {
            let mut s = String::new();
            for sent in sents {
                s.push_str(&sent.join(" "));
                s.push('\n');
            }
            s
        };
        let langs = self.language_ids();
        for l in &langs {
            write(format!("{l}.mono.txt"), lines(&self.mono_sentences(l)))?;
        }
        for a in &langs {
            for b in &langs {
                if a == b {
                    continue;
                }
                for split in [Split::Train, Split::Dev, Split::Test] {
                    if split == Split::Train && self.involves_unseen(a, b) {
                        continue;
                    }
                    let stem = match split {
                        Split::Train => format!("{a}-{b}"),
                        other => format!("{a}-{b}.{}", other.name()),
                    };
                    let (src, tgt): (Vec<_>, Vec<_>) = self.parallel(a, b, split).into_iter().unzip();
                    write(format!("{stem}.src.txt"), lines(&src))?;
                    write(format!("{stem}.tgt.txt"), lines(&tgt))?;
                }
                let mut d = String::new();
                for (x, y) in &self.gold_dictionaries[&(a.clone(), b.clone())] {
                    let _ = writeln!(d, "{x} {y}");
                }
                write(format!("dict.{a}-{b}.txt"), d)?;
            }
        }
        let meta = FamilyMeta {
            languages: langs,
            unseen: self.unseen.clone(),
            derivations: self.derivations.clone(),
        };
        write("family.json".into(), serde_json::to_string_pretty(&meta).expect("serializable") + "\n")
    }
}

/// Sidecar written next to the corpus files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyMeta {
    pub languages: Vec<String>,
    pub unseen: Option<String>,
    pub derivations: Vec<LanguageDerivation>,
}

/// Files under `dir` that are parallel training files (`<a>-<b>.{src,tgt}.txt`).
pub fn parallel_training_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(".src.txt").or_else(|| name.strip_suffix(".tgt.txt")) {
            if !stem.contains('.') && stem.contains('-') {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
