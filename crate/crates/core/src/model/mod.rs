//! Encoder-decoder Transformer over the frozen multilingual embedding matrix.

mod graph;
mod loss;
mod optim;
mod params;
mod train;
mod transformer;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{AttnSpec, Graph, NodeId};
pub use loss::{loss_softmax, loss_vmf, masked_softmax, KAPPA_FLOOR};
pub use optim::{apply_update, OptimizerConfig, OptimizerKind, OptimizerState, Schedule};
pub use params::{glorot, Gradients, Group, Param, ParamId, Parameters};
pub use train::{evaluate, make_batches, train, update_step, Batch, EvalStats, ParallelSet, TraceEntry, TrainConfig, TrainReport};
pub use transformer::{init_parameters, Example, ExampleOutput, HeadKind, HeadTarget, Layout, Net, TransformerConfig};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::vocab::{parse_vocab_file, MultiVocab, Token, UNK};

pub const SCHEMA_VERSION: u32 = 1;

/// Encoder output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Mat<f32>,
    /// `false` at padding positions.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TransformerConfig,
    pub params: Parameters<f32>,
    layout: Layout,
    pub vocab: MultiVocab,
}

impl Model {
    pub fn new(config: TransformerConfig, vocab: MultiVocab, seed: u64) -> Result<Self> {
        if config.d_model != vocab.dim() {
            return Err(Error::Config(format!("d_model {} differs from embedding dimension {}", config.d_model, vocab.dim())));
        }
        let (params, layout) = init_parameters(&config, seed)?;
        Ok(Self { config, params, layout, vocab })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Embedding rows that may be trained: special tokens, unless frozen.
    pub fn trainable_rows(&self) -> Vec<bool> {
        let specials_on = !self.params.is_frozen(Group::Specials);
        self.vocab.tokens().iter().map(|t| specials_on && !t.is_word()).collect()
    }

    pub fn net<'a>(&'a self, trainable_rows: &'a [bool]) -> Net<'a, f32> {
        Net { cfg: &self.config, layout: &self.layout, params: &self.params, emb: &self.vocab.embedding, trainable_rows }
    }

    pub fn set_frozen(&mut self, groups: &BTreeSet<Group>) {
        self.params.set_frozen(groups);
    }

    /// Replace the vocabulary by an append-only extension of it.
    pub fn with_vocab(&self, vocab: MultiVocab) -> Result<Self> {
        if vocab.dim() != self.vocab.dim() || vocab.len() < self.vocab.len() {
            return Err(Error::Config("replacement vocabulary is not an extension".into()));
        }
        for (i, t) in self.vocab.tokens().iter().enumerate() {
            if vocab.token(i) != t {
                return Err(Error::Conflict(format!("token {i} changed from `{}`", t.render())));
            }
        }
        Ok(Self { vocab, ..self.clone() })
    }

    /// Map words of `lang` to indices; words outside the vocabulary become UNK.
    pub fn index_words(&self, lang: &str, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| {
                self.vocab.word_index(lang, w).unwrap_or_else(|| {
                    log::warn!("`{lang}@{w}` is not in the vocabulary; using <unk>");
                    UNK
                })
            })
            .collect()
    }

    pub fn example(&self, src_lang: &str, src: &[String], tgt_lang: &str, tgt: &[String]) -> Result<Example> {
        let tag = self.vocab.tag(tgt_lang).ok_or_else(|| Error::Lookup(format!("no target tag for `{tgt_lang}`")))?;
        Ok(Example { src: self.index_words(src_lang, src), tgt: self.index_words(tgt_lang, tgt), tag })
    }

    /// Inference-mode encoder states.
    pub fn encode(&self, src: &[usize]) -> Result<EncoderStates> {
        let rows = vec![false; self.vocab.len()];
        let net = self.net(&rows);
        let mut g = net.graph();
        let id = net.encode(&mut g, src, None)?;
        Ok(EncoderStates { states: g.value(id).clone(), mask: src.iter().map(|&t| t != crate::vocab::PAD).collect() })
    }

    /// Decoder output-head input (after the generator layer norm) at the last
    /// position of `prefix`, which starts with the target tag.
    pub fn decoder_last_hidden(&self, enc: &EncoderStates, prefix: &[usize]) -> Result<Vec<f32>> {
        let rows = vec![false; self.vocab.len()];
        let net = self.net(&rows);
        let mut g = net.graph();
        let e = g.input(enc.states.clone());
        let mask = if enc.mask.iter().all(|&m| m) { None } else { Some(enc.mask.clone()) };
        let h = net.decode(&mut g, e, mask, prefix, None)?;
        let out = match self.config.head {
            HeadKind::Softmax => h,
            HeadKind::Vmf => net.project(&mut g, h)?,
        };
        let v = g.value(out);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// SHA-256 over the bytes of every tensor in `group`, in name order.
    pub fn group_checksum(&self, group: Group) -> String {
        let mut tensors: Vec<&Param<f32>> = self.params.iter().filter(|p| p.group == group).collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in tensors {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checksum over all Transformer tensors (everything except the embedding).
    pub fn transformer_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn vocab_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("vocab")
    }

    /// Writes the checkpoint container and, next to it, the vocabulary file
    /// it references by SHA-256.
    pub fn save(&self, path: &Path) -> Result<()> {
        let vocab_text = self.vocab.to_file_string();
        let vocab_path = Self::vocab_path(path);
        fs::write(&vocab_path, &vocab_text).map_err(|e| Error::io(&vocab_path, e))?;
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            kind: "model".into(),
            vocab_file: vocab_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            vocab_sha256: hex::encode(Sha256::digest(vocab_text.as_bytes())),
            frozen: self.params.frozen().iter().map(|g| g.name().to_string()).collect(),
            transformer: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut c = Container::new(text);
        for p in self.params.iter() {
            c.push(p.name.clone(), p.value.clone());
        }
        c.push("vocab.embedding", self.vocab.embedding.clone());
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let meta: CheckpointMeta = toml::from_str(&c.config).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        if meta.schema_version != SCHEMA_VERSION || meta.kind != "model" {
            return Err(Error::Checkpoint(format!("unsupported checkpoint (schema {}, kind {})", meta.schema_version, meta.kind)));
        }
        let vocab_path = path.with_file_name(&meta.vocab_file);
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        if hex::encode(Sha256::digest(text.as_bytes())) != meta.vocab_sha256 {
            return Err(Error::Checkpoint(format!("{} does not match the hash recorded in the checkpoint", vocab_path.display())));
        }
        let tokens: Vec<Token> = parse_vocab_file(&text, &vocab_path)?;
        let embedding = c.take("vocab.embedding")?;
        let vocab = MultiVocab::from_parts(tokens, embedding)?;

        let (mut params, _) = init_parameters(&meta.transformer, 0)?;
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for (id, name) in names.iter().enumerate() {
            let m = c.take(name)?;
            if m.shape() != params.value(id).shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", m.shape())));
            }
            *params.value_mut(id) = m;
        }
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        let frozen = meta.frozen.iter().map(|s| s.parse()).collect::<Result<BTreeSet<Group>>>()?;
        params.set_frozen(&frozen);
        let layout = Layout::resolve(&params, &meta.transformer)?;
        if meta.transformer.d_model != vocab.dim() {
            return Err(Error::Checkpoint("embedding dimension differs from d_model".into()));
        }
        Ok(Self { config: meta.transformer, params, layout, vocab })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    kind: String,
    vocab_file: String,
    vocab_sha256: String,
    frozen: Vec<String>,
    transformer: TransformerConfig,
}
