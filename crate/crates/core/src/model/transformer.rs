//! Post-layer-norm encoder-decoder Transformer over a frozen shared embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttnSpec, Graph, NodeId};
use super::params::{glorot, seeded, Gradients, Group, ParamId, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};
use crate::vocab::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Label-smoothed softmax over tied, language-masked output embeddings.
    Softmax,
    /// Continuous output trained toward the target word's embedding.
    Vmf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub relative_position_clip: usize,
    pub head: HeadKind,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::full(HeadKind::Softmax)
    }
}

impl TransformerConfig {
    /// 9 layers, d = 300, 6 heads, ff 1200.
    pub fn full(head: HeadKind) -> Self {
        let dropout = match head {
            HeadKind::Softmax => 0.2,
            HeadKind::Vmf => 0.1,
        };
        Self { layers: 9, d_model: 300, ff_dim: 1200, heads: 6, dropout, relative_position_clip: 16, head }
    }

    /// Small model for synthetic experiments and tests.
    pub fn desk(d_model: usize, layers: usize, head: HeadKind) -> Self {
        Self { layers, d_model, ff_dim: 4 * d_model, heads: 4, dropout: 0.1, relative_position_clip: 16, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ff_dim == 0 || self.heads == 0 {
            return Err(Error::Config("layers, d_model, ff_dim and heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    rel: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    attn: Attn,
    ln1: Ln,
    ff1: Lin,
    ff2: Lin,
    ln2: Ln,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    attn: Attn,
    ln1: Ln,
    cross: Attn,
    ln2: Ln,
    ff1: Lin,
    ff2: Lin,
    ln3: Ln,
}

/// Parameter ids resolved once from names.
#[derive(Debug, Clone)]
pub struct Layout {
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    head_ln: Ln,
    proj: Option<Lin>,
}

struct Builder<'a> {
    p: &'a mut Parameters<f32>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn lin(&mut self, name: &str, group: Group, i: usize, o: usize) -> Lin {
        let w = self.p.add(format!("{name}.w"), group, glorot(i, o, &mut self.rng));
        let b = self.p.add(format!("{name}.b"), group, Mat::zeros(1, o));
        Lin { w, b }
    }

    fn ln(&mut self, name: &str, group: Group, d: usize) -> Ln {
        let g = self.p.add(format!("{name}.g"), group, Mat::from_vec(1, d, vec![1.0; d]));
        let b = self.p.add(format!("{name}.b"), group, Mat::zeros(1, d));
        Ln { g, b }
    }

    fn attn(&mut self, name: &str, group: Group, cfg: &TransformerConfig, relative: bool) -> Attn {
        let d = cfg.d_model;
        let q = self.lin(&format!("{name}.q"), group, d, d);
        let k = self.lin(&format!("{name}.k"), group, d, d);
        let v = self.lin(&format!("{name}.v"), group, d, d);
        let o = self.lin(&format!("{name}.o"), group, d, d);
        let rel = relative.then(|| {
            let n = 2 * cfg.relative_position_clip + 1;
            let rk = self.p.add(format!("{name}.rel_k"), group, glorot(n, cfg.head_dim(), &mut self.rng));
            let rv = self.p.add(format!("{name}.rel_v"), group, glorot(n, cfg.head_dim(), &mut self.rng));
            (rk, rv)
        });
        Attn { q, k, v, o, rel }
    }
}

/// Fresh Glorot-initialized parameters and their layout.
pub fn init_parameters(cfg: &TransformerConfig, seed: u64) -> Result<(Parameters<f32>, Layout)> {
    cfg.validate()?;
    let mut p = Parameters::new();
    let mut b = Builder { p: &mut p, rng: seeded(seed) };
    let (d, f) = (cfg.d_model, cfg.ff_dim);
    for l in 0..cfg.layers {
        let n = format!("enc.{l}");
        b.attn(&format!("{n}.attn"), Group::Encoder, cfg, true);
        b.ln(&format!("{n}.ln1"), Group::Encoder, d);
        b.lin(&format!("{n}.ff1"), Group::Encoder, d, f);
        b.lin(&format!("{n}.ff2"), Group::Encoder, f, d);
        b.ln(&format!("{n}.ln2"), Group::Encoder, d);
    }
    for l in 0..cfg.layers {
        let n = format!("dec.{l}");
        b.attn(&format!("{n}.attn"), Group::Decoder, cfg, true);
        b.ln(&format!("{n}.ln1"), Group::Decoder, d);
        b.attn(&format!("{n}.cross"), Group::CrossAttention, cfg, false);
        b.ln(&format!("{n}.ln2"), Group::CrossAttention, d);
        b.lin(&format!("{n}.ff1"), Group::Decoder, d, f);
        b.lin(&format!("{n}.ff2"), Group::Decoder, f, d);
        b.ln(&format!("{n}.ln3"), Group::Decoder, d);
    }
    b.ln("head.ln", Group::OutputHead, d);
    if cfg.head == HeadKind::Vmf {
        b.lin("head.proj", Group::OutputHead, d, d);
    }
    let layout = Layout::resolve(&p, cfg)?;
    Ok((p, layout))
}

impl Layout {
    pub fn resolve<T: Scalar>(p: &Parameters<T>, cfg: &TransformerConfig) -> Result<Self> {
        let lin = |n: &str| -> Result<Lin> { Ok(Lin { w: p.id(&format!("{n}.w"))?, b: p.id(&format!("{n}.b"))? }) };
        let ln = |n: &str| -> Result<Ln> { Ok(Ln { g: p.id(&format!("{n}.g"))?, b: p.id(&format!("{n}.b"))? }) };
        let attn = |n: &str, relative: bool| -> Result<Attn> {
            let rel = if relative { Some((p.id(&format!("{n}.rel_k"))?, p.id(&format!("{n}.rel_v"))?)) } else { None };
            Ok(Attn {
                q: lin(&format!("{n}.q"))?,
                k: lin(&format!("{n}.k"))?,
                v: lin(&format!("{n}.v"))?,
                o: lin(&format!("{n}.o"))?,
                rel,
            })
        };
        let enc = (0..cfg.layers)
            .map(|l| {
                let n = format!("enc.{l}");
                Ok(EncLayer {
                    attn: attn(&format!("{n}.attn"), true)?,
                    ln1: ln(&format!("{n}.ln1"))?,
                    ff1: lin(&format!("{n}.ff1"))?,
                    ff2: lin(&format!("{n}.ff2"))?,
                    ln2: ln(&format!("{n}.ln2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.layers)
            .map(|l| {
                let n = format!("dec.{l}");
                Ok(DecLayer {
                    attn: attn(&format!("{n}.attn"), true)?,
                    ln1: ln(&format!("{n}.ln1"))?,
                    cross: attn(&format!("{n}.cross"), false)?,
                    ln2: ln(&format!("{n}.ln2"))?,
                    ff1: lin(&format!("{n}.ff1"))?,
                    ff2: lin(&format!("{n}.ff2"))?,
                    ln3: ln(&format!("{n}.ln3"))?,
                })
            })
            .collect::<Result<_>>()?;
        let proj = if cfg.head == HeadKind::Vmf { Some(lin("head.proj")?) } else { None };
        Ok(Self { enc, dec, head_ln: ln("head.ln")?, proj })
    }
}

/// One training or evaluation example, already mapped to vocabulary indices.
/// `tgt` excludes the language tag and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Index of the target-language tag token.
    pub tag: usize,
}

impl Example {
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(self.tag).chain(self.tgt.iter().copied()).collect()
    }

    pub fn decoder_output(&self) -> Vec<usize> {
        self.tgt.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt.len() + 1
    }
}

/// What the output head is scored against.
pub enum HeadTarget<'a> {
    /// Sorted allowed vocabulary indices for the target language.
    Softmax { allowed: &'a [usize], label_smoothing: f64 },
    /// With `allowed`, accuracy is also scored by nearest allowed embedding;
    /// training leaves it out so step cost does not depend on vocabulary size.
    Vmf { lambda: f64, allowed: Option<&'a [usize]> },
}

/// Everything a forward pass needs; generic so gradient checks can run in f64.
pub struct Net<'a, T: Scalar> {
    pub cfg: &'a TransformerConfig,
    pub layout: &'a Layout,
    pub params: &'a Parameters<T>,
    pub emb: &'a Mat<T>,
    pub trainable_rows: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct ExampleOutput<T: Scalar> {
    pub loss: T,
    pub tokens: usize,
    /// Positions whose best-scoring allowed token equals the reference.
    pub correct: usize,
    pub grads: Option<Gradients<T>>,
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn graph(&self) -> Graph<'a, T> {
        Graph::new(self.params, self.emb, self.trainable_rows)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.emb.rows()) {
            Some(t) => Err(Error::Input(format!("token index {t} out of range for vocabulary of {}", self.emb.rows()))),
            None => Ok(()),
        }
    }

    fn embed_scale(&self) -> T {
        T::of((self.cfg.d_model as f64).sqrt())
    }

    fn block_attn(&self, g: &mut Graph<'a, T>, x: NodeId, kv: NodeId, a: &Attn, causal: bool, key_mask: Option<Vec<bool>>) -> NodeId {
        let q = g.linear(x, a.q.w, a.q.b);
        let k = g.linear(kv, a.k.w, a.k.b);
        let v = g.linear(kv, a.v.w, a.v.b);
        let rel = a.rel.map(|(rk, rv)| (rk, rv, self.cfg.relative_position_clip));
        let ctx = g.attention(q, k, v, AttnSpec { heads: self.cfg.heads, causal, key_mask, rel });
        g.linear(ctx, a.o.w, a.o.b)
    }

    fn ff(&self, g: &mut Graph<'a, T>, x: NodeId, ff1: Lin, ff2: Lin, rng: &mut Option<&mut ChaCha8Rng>) -> NodeId {
        let h = g.linear(x, ff1.w, ff1.b);
        let h = g.relu(h);
        let h = g.dropout(h, self.cfg.dropout, rng.as_deref_mut());
        g.linear(h, ff2.w, ff2.b)
    }

    /// Encoder states for `src`. PAD keys are masked out of attention.
    pub fn encode(&self, g: &mut Graph<'a, T>, src: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        self.check_tokens(src)?;
        if src.is_empty() {
            return Err(Error::Input("empty source sentence".into()));
        }
        let mask: Vec<bool> = src.iter().map(|&t| t != crate::vocab::PAD).collect();
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        let x = g.embed(src, self.embed_scale());
        let mut x = g.dropout(x, self.cfg.dropout, rng.as_deref_mut());
        for l in &self.layout.enc {
            let a = self.block_attn(g, x, x, &l.attn, false, key_mask.clone());
            let a = g.dropout(a, self.cfg.dropout, rng.as_deref_mut());
            let r = g.add(x, a);
            x = g.layer_norm(r, l.ln1.g, l.ln1.b);
            let f = self.ff(g, x, l.ff1, l.ff2, &mut rng);
            let f = g.dropout(f, self.cfg.dropout, rng.as_deref_mut());
            let r = g.add(x, f);
            x = g.layer_norm(r, l.ln2.g, l.ln2.b);
        }
        Ok(x)
    }

    /// Decoder hidden states (after the output layer norm) for every input position.
    pub fn decode(
        &self,
        g: &mut Graph<'a, T>,
        enc: NodeId,
        src_mask: Option<Vec<bool>>,
        tgt_in: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.check_tokens(tgt_in)?;
        let x = g.embed(tgt_in, self.embed_scale());
        let mut x = g.dropout(x, self.cfg.dropout, rng.as_deref_mut());
        for l in &self.layout.dec {
            let a = self.block_attn(g, x, x, &l.attn, true, None);
            let a = g.dropout(a, self.cfg.dropout, rng.as_deref_mut());
            let r = g.add(x, a);
            x = g.layer_norm(r, l.ln1.g, l.ln1.b);
            let c = self.block_attn(g, x, enc, &l.cross, false, src_mask.clone());
            let c = g.dropout(c, self.cfg.dropout, rng.as_deref_mut());
            let r = g.add(x, c);
            x = g.layer_norm(r, l.ln2.g, l.ln2.b);
            let f = self.ff(g, x, l.ff1, l.ff2, &mut rng);
            let f = g.dropout(f, self.cfg.dropout, rng.as_deref_mut());
            let r = g.add(x, f);
            x = g.layer_norm(r, l.ln3.g, l.ln3.b);
        }
        Ok(g.layer_norm(x, self.layout.head_ln.g, self.layout.head_ln.b))
    }

    /// vMF output vectors from decoder hidden states.
    pub fn project(&self, g: &mut Graph<'a, T>, h: NodeId) -> Result<NodeId> {
        let p = self.layout.proj.ok_or_else(|| Error::Config("model has no vMF projection".into()))?;
        Ok(g.linear(h, p.w, p.b))
    }

    /// Summed loss over target positions; gradients when `with_grad`.
    pub fn example_loss(
        &self,
        ex: &Example,
        target: &HeadTarget,
        rng: Option<&mut ChaCha8Rng>,
        with_grad: bool,
    ) -> Result<ExampleOutput<T>> {
        let mut rng = rng;
        let mut g = self.graph();
        let enc = self.encode(&mut g, &ex.src, rng.as_deref_mut())?;
        let src_mask: Vec<bool> = ex.src.iter().map(|&t| t != crate::vocab::PAD).collect();
        let src_mask = if src_mask.iter().all(|&m| m) { None } else { Some(src_mask) };
        let h = self.decode(&mut g, enc, src_mask, &ex.decoder_input(), rng)?;
        let gold = ex.decoder_output();
        let (root, correct) = match target {
            HeadTarget::Softmax { allowed, label_smoothing } => {
                let cols: Vec<usize> = gold
                    .iter()
                    .map(|t| {
                        allowed.binary_search(t).map_err(|_| Error::Data(format!("reference token {t} is outside the target mask")))
                    })
                    .collect::<Result<_>>()?;
                let logits = g.tied_logits(h, allowed);
                let lv = g.value(logits);
                let correct = (0..lv.rows()).filter(|&i| argmax(lv.row(i)) == cols[i]).count();
                (g.softmax_xent(logits, &cols, T::of(*label_smoothing))?, correct)
            }
            HeadTarget::Vmf { lambda, allowed } => {
                let y = self.project(&mut g, h)?;
                let correct = match allowed {
                    Some(allowed) => {
                        let yv = g.value(y);
                        (0..yv.rows()).filter(|&i| nearest_cosine(self.emb, allowed, yv.row(i)) == gold[i]).count()
                    }
                    None => 0,
                };
                (g.vmf(y, &gold, T::of(*lambda)), correct)
            }
        };
        let loss = g.value(root)[(0, 0)];
        let grads = with_grad.then(|| g.backward(root, T::one()));
        Ok(ExampleOutput { loss, tokens: gold.len(), correct, grads })
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index (into the vocabulary) of the allowed row with the highest cosine to `y`.
pub(crate) fn nearest_cosine<T: Scalar>(emb: &Mat<T>, allowed: &[usize], y: &[T]) -> usize {
    let mut best = (T::neg_infinity(), allowed[0]);
    for &t in allowed {
        let c = crate::tensor::cosine(y, emb.row(t));
        if c > best.0 {
            best = (c, t);
        }
    }
    best.1
}

