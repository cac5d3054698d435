//! Merged multilingual full-word vocabulary.
//!
//! Every word is stored with a language prefix (`en@bank`), so equal surfaces
//! in different languages are distinct tokens with distinct rows. Special
//! tokens (padding, sentence boundaries, unknown, one target-language tag per
//! language) occupy the first indices; their embedding rows are trainable,
//! word rows are frozen.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::embeddings::{fnv1a, normalize_in_place, EmbeddingTable, OovFlag, SubwordBank};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const FIXED_SPECIALS: usize = 4;

pub fn validate_language_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_lowercase()) {
        return Err(Error::Config(format!("language id `{id}` must be non-empty lowercase ASCII letters")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrefixedToken {
    pub language: String,
    pub surface: String,
}

impl PrefixedToken {
    pub fn render(&self) -> String {
        format!("{}@{}", self.language, self.surface)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Unk,
    /// Target-language selector fed as the first decoder input.
    Tag(String),
    Word(PrefixedToken),
}

impl Token {
    pub fn render(&self) -> String {
        match self {
            Token::Pad => "<pad>".into(),
            Token::Bos => "<s>".into(),
            Token::Eos => "</s>".into(),
            Token::Unk => "<unk>".into(),
            Token::Tag(l) => format!("<2{l}>"),
            Token::Word(w) => w.render(),
        }
    }

    pub fn parse(s: &str) -> Result<Token> {
        Ok(match s {
            "<pad>" => Token::Pad,
            "<s>" => Token::Bos,
            "</s>" => Token::Eos,
            "<unk>" => Token::Unk,
            _ => {
                if let Some(l) = s.strip_prefix("<2").and_then(|r| r.strip_suffix('>')) {
                    validate_language_id(l)?;
                    Token::Tag(l.to_string())
                } else {
                    let (lang, surface) =
                        s.split_once('@').ok_or_else(|| Error::Input(format!("token `{s}` has no language prefix")))?;
                    validate_language_id(lang)?;
                    if surface.is_empty() {
                        return Err(Error::Input(format!("token `{s}` has an empty surface")));
                    }
                    Token::Word(PrefixedToken { language: lang.into(), surface: surface.into() })
                }
            }
        })
    }

    pub fn is_word(&self) -> bool {
        matches!(self, Token::Word(_))
    }
}

/// Per-language vocabulary restricted to a corpus, with its embedding rows.
#[derive(Debug, Clone)]
pub struct LanguageVocab {
    pub language: String,
    pub words: Vec<String>,
    pub rows: Mat<f32>,
    /// Corpus types with no stored row and no live subword bucket.
    pub hard_oov: Vec<String>,
    /// Types included through subword composition.
    pub composed: Vec<String>,
}

/// Frequency-sorted corpus types that have a stored or composable vector.
pub fn build_from_corpus(
    table: &EmbeddingTable,
    bank: Option<&SubwordBank>,
    corpus: &[Vec<String>],
    language: &str,
) -> Result<LanguageVocab> {
    validate_language_id(language)?;
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for w in s {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut types: Vec<(&str, usize)> = freq.into_iter().collect();
    types.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut out = LanguageVocab {
        language: language.into(),
        words: Vec::new(),
        rows: Mat::zeros(0, table.dim()),
        hard_oov: Vec::new(),
        composed: Vec::new(),
    };
    for (w, _) in types {
        if let Some(v) = table.vector(w) {
            out.words.push(w.into());
            out.rows.push_row(v);
            continue;
        }
        match bank.map(|b| b.compose(w)).transpose()? {
            Some((v, OovFlag::Composed)) => {
                out.words.push(w.into());
                out.rows.push_row(&v);
                out.composed.push(w.into());
            }
            _ => out.hard_oov.push(w.into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageMask {
    pub language: String,
    /// Sorted allowed indices: the language's words plus EOS.
    pub allowed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiVocab {
    tokens: Vec<Token>,
    index: HashMap<String, usize>,
    lang_ranges: BTreeMap<String, Vec<usize>>,
    tags: BTreeMap<String, usize>,
    /// Languages in insertion order.
    languages: Vec<String>,
    pub embedding: Mat<f32>,
}

/// Deterministic unit-norm initial row for a special token.
fn special_row(token: &Token, dim: usize) -> Vec<f32> {
    if *token == Token::Pad {
        return vec![0.0; dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.render().as_bytes()) as u64);
    let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    normalize_in_place(&mut v);
    v
}

/// Concatenate per-language vocabularies behind the special tokens.
pub fn merge(vocabs: &[LanguageVocab]) -> Result<MultiVocab> {
    let dim = vocabs.first().map(|v| v.rows.cols()).ok_or_else(|| Error::Config("nothing to merge".into()))?;
    let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Unk];
    for v in vocabs {
        validate_language_id(&v.language)?;
        if v.rows.cols() != dim {
            return Err(Error::Config(format!(
                "embedding dimension {} of `{}` differs from {dim}",
                v.rows.cols(),
                v.language
            )));
        }
        if v.words.len() != v.rows.rows() {
            return Err(Error::Config(format!("`{}` has {} words but {} rows", v.language, v.words.len(), v.rows.rows())));
        }
        tokens.push(Token::Tag(v.language.clone()));
    }
    let mut embedding = Mat::zeros(0, dim);
    for t in &tokens {
        embedding.push_row(&special_row(t, dim));
    }
    let mut vocab = MultiVocab::from_parts(tokens, embedding)?;
    for v in vocabs {
        vocab = vocab.extend(v)?;
    }
    Ok(vocab)
}

impl MultiVocab {
    /// Rebuild from a token list (index order) and matching embedding rows.
    pub fn from_parts(tokens: Vec<Token>, embedding: Mat<f32>) -> Result<Self> {
        if tokens.len() != embedding.rows() {
            return Err(Error::Config(format!("{} tokens but {} embedding rows", tokens.len(), embedding.rows())));
        }
        if tokens.len() < FIXED_SPECIALS
            || tokens[PAD] != Token::Pad
            || tokens[BOS] != Token::Bos
            || tokens[EOS] != Token::Eos
            || tokens[UNK] != Token::Unk
        {
            return Err(Error::Config("vocabulary must start with <pad> <s> </s> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut lang_ranges: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut tags = BTreeMap::new();
        let mut languages = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.render(), i).is_some() {
                return Err(Error::Conflict(format!("duplicate token `{}`", t.render())));
            }
            match t {
                Token::Word(w) => {
                    if !lang_ranges.contains_key(&w.language) {
                        languages.push(w.language.clone());
                    }
                    lang_ranges.entry(w.language.clone()).or_default().push(i);
                }
                Token::Tag(l) => {
                    tags.insert(l.clone(), i);
                }
                _ => {}
            }
        }
        Ok(Self { tokens, index, lang_ranges, tags, languages, embedding })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &Token {
        &self.tokens[i]
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.lang_ranges.contains_key(lang)
    }

    pub fn index_of(&self, rendered: &str) -> Option<usize> {
        self.index.get(rendered).copied()
    }

    pub fn word_index(&self, lang: &str, surface: &str) -> Option<usize> {
        self.index_of(&format!("{lang}@{surface}"))
    }

    pub fn language_indices(&self, lang: &str) -> Option<&[usize]> {
        self.lang_ranges.get(lang).map(Vec::as_slice)
    }

    pub fn tag(&self, lang: &str) -> Option<usize> {
        self.tags.get(lang).copied()
    }

    /// Indices of all non-word tokens; these rows are trainable.
    pub fn special_indices(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| !self.tokens[i].is_word()).collect()
    }

    pub fn target_mask(&self, lang: &str) -> Result<LanguageMask> {
        let words = self.lang_ranges.get(lang).ok_or_else(|| Error::Lookup(format!("unknown language `{lang}`")))?;
        let mut allowed = Vec::with_capacity(words.len() + 1);
        allowed.push(EOS);
        allowed.extend_from_slice(words);
        allowed.sort_unstable();
        Ok(LanguageMask { language: lang.into(), allowed })
    }

    /// Append a new language's words. Existing indices and rows are untouched.
    pub fn extend(&self, v: &LanguageVocab) -> Result<MultiVocab> {
        validate_language_id(&v.language)?;
        if self.has_language(&v.language) {
            return Err(Error::Conflict(format!("language `{}` already present", v.language)));
        }
        if v.rows.cols() != self.dim() {
            return Err(Error::Config(format!("embedding dimension {} differs from {}", v.rows.cols(), self.dim())));
        }
        if v.words.len() != v.rows.rows() {
            return Err(Error::Config(format!("`{}` has {} words but {} rows", v.language, v.words.len(), v.rows.rows())));
        }
        let mut tokens = self.tokens.clone();
        let mut embedding = self.embedding.clone();
        for (i, w) in v.words.iter().enumerate() {
            tokens.push(Token::Word(PrefixedToken { language: v.language.clone(), surface: w.clone() }));
            embedding.push_row(v.rows.row(i));
        }
        MultiVocab::from_parts(tokens, embedding)
    }

    /// Append a target-language tag initialized from an existing tag's row.
    pub fn add_target_tag(&self, lang: &str, init_from: &str) -> Result<MultiVocab> {
        validate_language_id(lang)?;
        if self.tags.contains_key(lang) {
            return Err(Error::Conflict(format!("tag for `{lang}` already present")));
        }
        let src = self.tag(init_from).ok_or_else(|| Error::Lookup(format!("no tag for `{init_from}`")))?;
        let mut tokens = self.tokens.clone();
        let mut embedding = self.embedding.clone();
        tokens.push(Token::Tag(lang.into()));
        let row = embedding.row(src).to_vec();
        embedding.push_row(&row);
        MultiVocab::from_parts(tokens, embedding)
    }

    /// SHA-256 over the little-endian bytes of every word row, in index order.
    pub fn word_rows_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.is_word() {
                for v in self.embedding.row(i) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Vocabulary file body: header, then one rendered token per line.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("clwe-vocab v1 specials={}", self.special_indices().len());
        for l in &self.languages {
            let _ = write!(out, " {l}={}", self.lang_ranges[l].len());
        }
        out.push('\n');
        for t in &self.tokens {
            out.push_str(&t.render());
            out.push('\n');
        }
        out
    }

    pub fn save_tokens(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// Tokens and embedding in one container; the token list is the config block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(self.to_file_string());
        c.push("embedding", self.embedding.clone());
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let tokens = parse_vocab_file(&c.config, path)?;
        let embedding = c.take("embedding")?;
        Self::from_parts(tokens, embedding)
    }
}

/// Parse a vocabulary file into tokens, checking the header counts.
pub fn parse_vocab_file(text: &str, path: &Path) -> Result<Vec<Token>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, 1, "missing header"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("clwe-vocab") || fields.next() != Some("v1") {
        return Err(Error::format(path, 1, "not a v1 vocabulary file"));
    }
    let mut specials = None;
    let mut counts: Vec<(String, usize)> = Vec::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| Error::format(path, 1, format!("bad header field `{f}`")))?;
        let n: usize = v.parse().map_err(|_| Error::format(path, 1, format!("bad count `{v}`")))?;
        if k == "specials" {
            specials = Some(n);
        } else {
            counts.push((k.into(), n));
        }
    }
    let mut tokens = Vec::new();
    for (k, line) in lines.enumerate() {
        tokens.push(Token::parse(line).map_err(|e| Error::format(path, k + 2, e.to_string()))?);
    }
    let found_specials = tokens.iter().filter(|t| !t.is_word()).count();
    if specials != Some(found_specials) {
        return Err(Error::format(path, 1, format!("header declares {specials:?} specials, found {found_specials}")));
    }
    for (lang, n) in counts {
        let found = tokens.iter().filter(|t| matches!(t, Token::Word(w) if w.language == lang)).count();
        if found != n {
            return Err(Error::format(path, 1, format!("header declares {n} `{lang}` words, found {found}")));
        }
    }
    Ok(tokens)
}
