//! Inference: masked beam search, vMF nearest-neighbour decoding, repeat
//! suppression, and zero-shot plug-in of languages the model never saw.

use serde::{Deserialize, Serialize};

use crate::alignment::LinearMap;
use crate::embeddings::{normalize_in_place, EmbeddingTable, SubwordBank};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{loss_vmf, HeadKind, Model};
use crate::tensor::{cosine, dot, Mat};
use crate::tokenize::{detokenize, tokenize};
use crate::vocab::{build_from_corpus, LanguageMask, LanguageVocab, Token, EOS};

/// Collapse rule for degenerate loops in finished hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatRule {
    pub n_max: usize,
    pub threshold: usize,
}

impl Default for RepeatRule {
    fn default() -> Self {
        Self { n_max: 4, threshold: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub source_language: String,
    pub target_language: String,
    /// Tokenized source sentences (unprefixed surface forms).
    pub sentences: Vec<Vec<String>>,
    pub beam_size: usize,
    pub max_length_factor: f64,
    pub suppress_repeats: Option<RepeatRule>,
    /// λ of the vMF head, used only for hypothesis scores.
    pub vmf_lambda: f64,
}

impl TranslationRequest {
    pub fn new(source: &str, target: &str, sentences: Vec<Vec<String>>) -> Self {
        Self {
            source_language: source.into(),
            target_language: target.into(),
            sentences,
            beam_size: 1,
            max_length_factor: 2.0,
            suppress_repeats: Some(RepeatRule::default()),
            vmf_lambda: 0.2,
        }
    }

    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam_size = beam;
        self
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.max_length_factor > 0.0) {
            return Err(Error::Config(format!("max length factor {} must be positive", self.max_length_factor)));
        }
        if let Some(r) = self.suppress_repeats {
            if r.n_max == 0 || r.threshold < 2 {
                return Err(Error::Config("repeat suppression needs n_max ≥ 1 and threshold ≥ 2".into()));
            }
        }
        for lang in [&self.source_language, &self.target_language] {
            if !model.vocab.has_language(lang) {
                return Err(Error::Config(format!("language `{lang}` is not in the model vocabulary")));
            }
        }
        if model.vocab.tag(&self.target_language).is_none() {
            return Err(Error::Config(format!("model has no target tag for `{}`", self.target_language)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS when `finished`. Excludes the tag.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability (softmax) or negative vMF loss.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized_score(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Allowed token whose row has the highest cosine with `yhat`.
pub fn vmf_decode_step(yhat: &[f32], emb: &Mat<f32>, mask: &LanguageMask) -> Result<usize> {
    if mask.allowed.is_empty() {
        return Err(Error::Config(format!("empty target mask for `{}`", mask.language)));
    }
    let mut best = (f32::NEG_INFINITY, mask.allowed[0]);
    for &t in &mask.allowed {
        let c = cosine(yhat, emb.row(t));
        if c > best.0 {
            best = (c, t);
        }
    }
    Ok(best.1)
}

/// Repeatedly collapse runs of one n-gram repeated at least `threshold`
/// times in a row down to a single copy. Each round takes the largest n that
/// has such a run and collapses its leftmost occurrence; stops at a fixpoint.
pub fn suppress_repeats<T: PartialEq + Clone>(tokens: &[T], n_max: usize, threshold: usize) -> Vec<T> {
    let mut cur = tokens.to_vec();
    if n_max == 0 || threshold < 2 {
        return cur;
    }
    'outer: loop {
        for n in (1..=n_max).rev() {
            if let Some((start, reps)) = leftmost_run(&cur, n, threshold) {
                cur.drain(start + n..start + n * reps);
                continue 'outer;
            }
        }
        return cur;
    }
}

fn leftmost_run<T: PartialEq>(s: &[T], n: usize, threshold: usize) -> Option<(usize, usize)> {
    if s.len() < n * threshold {
        return None;
    }
    for start in 0..=s.len() - n * threshold {
        let mut reps = 1;
        while start + n * (reps + 1) <= s.len() && s[start + n * reps..start + n * (reps + 1)] == s[start..start + n] {
            reps += 1;
        }
        if reps >= threshold {
            return Some((start, reps));
        }
    }
    None
}

/// (token, step score) candidates for extending one prefix, best first.
fn expand(model: &Model, enc: &crate::model::EncoderStates, prefix: &[usize], mask: &LanguageMask, k: usize, lambda: f64) -> Result<Vec<(usize, f64)>> {
    let h = model.decoder_last_hidden(enc, prefix)?;
    let emb = &model.vocab.embedding;
    let mut scored: Vec<(usize, f64)> = match model.config.head {
        HeadKind::Softmax => {
            let logits: Vec<f64> = mask.allowed.iter().map(|&t| dot(&h, emb.row(t)) as f64).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            mask.allowed.iter().zip(&logits).map(|(&t, &l)| (t, l - lse)).collect()
        }
        // rank by cosine, which orders candidates exactly as the vMF loss does
        HeadKind::Vmf => mask.allowed.iter().map(|&t| (t, cosine(&h, emb.row(t)) as f64)).collect(),
    };
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    if model.config.head == HeadKind::Vmf {
        let y: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        for c in &mut scored {
            let mut e: Vec<f64> = emb.row(c.0).iter().map(|&v| v as f64).collect();
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                e.iter_mut().for_each(|v| *v /= n);
            }
            c.1 = -loss_vmf(&y, &e, lambda).0;
        }
    }
    Ok(scored)
}

fn decode_one(model: &Model, src: &[usize], tag: usize, mask: &LanguageMask, req: &TranslationRequest) -> Result<Hypothesis> {
    let enc = model.encode(src)?;
    let max_len = ((req.max_length_factor * src.len() as f64).ceil() as usize).max(1);
    let k = req.beam_size;
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for hyp in &live {
            let prefix: Vec<usize> = std::iter::once(tag).chain(hyp.tokens.iter().copied()).collect();
            for (t, s) in expand(model, &enc, &prefix, mask, k, req.vmf_lambda)? {
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                cands.push(Hypothesis { tokens, score: hyp.score + s, finished: t == EOS });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        cands.truncate(k - finished.len());
        live.clear();
        for c in cands {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= k || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { live } else { finished };
    let best = pool
        .into_iter()
        .max_by(|a, b| a.normalized_score().total_cmp(&b.normalized_score()).then_with(|| b.tokens.cmp(&a.tokens)))
        .expect("beam keeps at least one hypothesis");
    Ok(best)
}

/// Best hypothesis per sentence; `None` for empty sentences, which are skipped.
pub fn beam_search(model: &Model, req: &TranslationRequest) -> Result<Vec<Option<Hypothesis>>> {
    req.validate(model)?;
    let mask = model.vocab.target_mask(&req.target_language)?;
    let tag = model.vocab.tag(&req.target_language).expect("validated");
    let out = exec::map(&req.sentences, |s| {
        if s.is_empty() {
            log::warn!("skipping empty source sentence");
            return Ok(None);
        }
        let src = model.index_words(&req.source_language, s);
        let mut hyp = decode_one(model, &src, tag, &mask, req)?;
        if let Some(r) = req.suppress_repeats {
            let had_eos = hyp.finished;
            let mut body = suppress_repeats(hyp.content(), r.n_max, r.threshold);
            if had_eos {
                body.push(EOS);
            }
            hyp.tokens = body;
        }
        Ok(Some(hyp))
    });
    out.into_iter().collect()
}

/// Prefixed token strings of a hypothesis, without EOS.
pub fn render_tokens(model: &Model, hyp: &Hypothesis) -> Vec<String> {
    hyp.content().iter().map(|&t| model.vocab.token(t).render()).collect()
}

/// Surface words of a hypothesis, prefixes stripped.
pub fn surface_words(model: &Model, hyp: &Hypothesis) -> Vec<String> {
    hyp.content()
        .iter()
        .map(|&t| match model.vocab.token(t) {
            Token::Word(p) => p.surface.clone(),
            other => other.render(),
        })
        .collect()
}

/// Translate raw text lines. Empty lines stay empty.
pub fn translate_lines(model: &Model, source: &str, target: &str, lines: &[String], beam: usize) -> Result<Vec<String>> {
    let mut req = TranslationRequest::new(source, target, lines.iter().map(|l| tokenize(l)).collect());
    req.beam_size = beam;
    let hyps = beam_search(model, &req)?;
    Ok(hyps.iter().map(|h| h.as_ref().map(|h| detokenize(&render_tokens(model, h))).unwrap_or_default()).collect())
}

/// Vocabulary rows for `language` in the hub space: corpus types (or every
/// table word) looked up or composed in the original space, then mapped.
pub fn mapped_language_vocab(
    table: &EmbeddingTable,
    bank: Option<&SubwordBank>,
    map: &LinearMap,
    corpus: Option<&[Vec<String>]>,
    language: &str,
    renormalize: bool,
) -> Result<LanguageVocab> {
    let mut lv = match corpus {
        Some(c) => build_from_corpus(table, bank, c, language)?,
        None => LanguageVocab {
            language: language.into(),
            words: table.words().to_vec(),
            rows: table.matrix().clone(),
            hard_oov: Vec::new(),
            composed: Vec::new(),
        },
    };
    // map after composition so subword-built rows land in the hub space too
    lv.rows = map.apply_rows(&lv.rows);
    if renormalize {
        for i in 0..lv.rows.rows() {
            normalize_in_place(lv.rows.row_mut(i));
        }
    }
    if !lv.hard_oov.is_empty() {
        log::warn!("{} `{language}` types have no vector and will read as <unk>", lv.hard_oov.len());
    }
    Ok(lv)
}

/// How a new language enters a trained model.
#[derive(Debug, Clone)]
pub struct PlugIn<'a> {
    pub language: &'a str,
    /// Hub language the map targets; its tag row seeds the new target tag.
    pub pivot: &'a str,
    pub renormalize: bool,
    /// Restrict the vocabulary to types of this corpus; all table words otherwise.
    pub corpus: Option<&'a [Vec<String>]>,
    pub bank: Option<&'a SubwordBank>,
    /// Also add a target tag so the model can be asked to decode into the language.
    pub add_tag: bool,
}

/// Extend `model` with `table` mapped into the hub space. Only the
/// vocabulary and embedding matrix change.
pub fn plug_in_language(model: &Model, table: &EmbeddingTable, map: &LinearMap, opts: &PlugIn) -> Result<Model> {
    if model.vocab.has_language(opts.language) {
        return Err(Error::Config(format!("language `{}` is already in the vocabulary", opts.language)));
    }
    if map.source_language != opts.language || map.target_language != opts.pivot {
        return Err(Error::Config(format!(
            "map goes {}→{}, expected {}→{}",
            map.source_language, map.target_language, opts.language, opts.pivot
        )));
    }
    if table.dim() != model.vocab.dim() {
        return Err(Error::Config(format!("embedding dimension {} differs from model dimension {}", table.dim(), model.vocab.dim())));
    }
    let lv = mapped_language_vocab(table, opts.bank, map, opts.corpus, opts.language, opts.renormalize)?;
    let mut vocab = model.vocab.extend(&lv).map_err(|e| Error::Config(e.to_string()))?;
    if opts.add_tag {
        vocab = vocab.add_target_tag(opts.language, opts.pivot).map_err(|e| Error::Config(e.to_string()))?;
    }
    model.with_vocab(vocab)
}
