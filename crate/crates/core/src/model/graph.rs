//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records one example's forward pass; [`Graph::backward`] walks
//! it in reverse and returns gradients for trainable parameters and for
//! trainable rows of the shared embedding matrix. Graphs are cheap and
//! per-example, so independent examples can be processed on separate threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_softmax, loss_vmf};
use super::params::{Gradients, ParamId, Parameters};
use crate::error::Result;
use crate::tensor::{axpy, dot, Mat, Scalar};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

/// Attention settings for one call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    /// `false` marks keys that must not be attended to (padding).
    pub key_mask: Option<Vec<bool>>,
    /// Relative-position key and value tables, each (2·clip+1) × head_dim.
    pub rel: Option<(ParamId, ParamId, usize)>,
}

enum Op<T> {
    Input,
    Embed { tokens: Vec<usize>, scale: T },
    Linear { x: NodeId, w: ParamId, b: ParamId },
    Add(NodeId, NodeId),
    Relu(NodeId),
    Dropout { x: NodeId, mask: Vec<T> },
    LayerNorm { x: NodeId, g: ParamId, b: ParamId, xhat: Mat<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec, probs: Vec<Mat<T>> },
    TiedLogits { x: NodeId, allowed: Vec<usize> },
    /// Summed loss over rows; `dlogits` caches d loss / d logits.
    SoftmaxXent { logits: NodeId, dlogits: Mat<T> },
    /// `targets` are embedding rows; `units` their normalized copies and `norms` the original lengths.
    Vmf { yhat: NodeId, dyhat: Mat<T>, targets: Vec<usize>, units: Mat<T>, norms: Vec<T>, lambda: T },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Graph<'a, T: Scalar> {
    params: &'a Parameters<T>,
    emb: &'a Mat<T>,
    trainable_rows: &'a [bool],
    nodes: Vec<Node<T>>,
}

fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(clip as isize), clip as isize) + clip as isize) as usize
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `trainable_rows[t]` says whether embedding row t may receive gradient.
    pub fn new(params: &'a Parameters<T>, emb: &'a Mat<T>, trainable_rows: &'a [bool]) -> Self {
        Self { params, emb, trainable_rows, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Rows of the embedding matrix, multiplied by `scale`.
    pub fn embed(&mut self, tokens: &[usize], scale: T) -> NodeId {
        let mut v = self.emb.select_rows(tokens);
        v.scale(scale);
        self.push(v, Op::Embed { tokens: tokens.to_vec(), scale })
    }

    /// x · W + b with W stored as (in × out).
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let mut v = self.value(x).matmul(self.params.value(w));
        let bias = self.params.value(b).row(0);
        for i in 0..v.rows() {
            axpy(T::one(), bias, v.row_mut(i));
        }
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| *a = a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    /// Inverted dropout. Identity when `p` is 0 or no RNG is given.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).data().len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().zip(&mask).for_each(|(a, &m)| *a = *a * m);
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn layer_norm(&mut self, x: NodeId, g: ParamId, b: ParamId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let (gain, bias) = (self.params.value(g).row(0), self.params.value(b).row(0));
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let s = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(s);
            for j in 0..cols {
                let h = (r[j] - mean) * s;
                xhat[(i, j)] = h;
                out[(i, j)] = h * gain[j] + bias[j];
            }
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention over already-projected q, k, v,
    /// with optional relative-position terms on keys and values.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        let dh = d / spec.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let rel = spec.rel.map(|(rk, rv, clip)| (self.params.value(rk), self.params.value(rv), clip));
        let mut out = Mat::zeros(lq, d);
        let mut probs = Vec::with_capacity(spec.heads);
        let mut kr = vec![T::zero(); dh];
        let mut vr = vec![T::zero(); dh];
        for h in 0..spec.heads {
            let cs = h * dh..(h + 1) * dh;
            let mut p = Mat::zeros(lq, lk);
            for i in 0..lq {
                let qi = &qv.row(i)[cs.clone()];
                let mut max = T::neg_infinity();
                for j in 0..lk {
                    let allowed = !(spec.causal && j > i) && spec.key_mask.as_ref().is_none_or(|m| m[j]);
                    if !allowed {
                        p[(i, j)] = T::neg_infinity();
                        continue;
                    }
                    kr.copy_from_slice(&kv.row(j)[cs.clone()]);
                    if let Some((rk, _, clip)) = rel {
                        axpy(T::one(), rk.row(rel_index(i, j, clip)), &mut kr);
                    }
                    let e = dot(qi, &kr) * scale;
                    p[(i, j)] = e;
                    max = max.max(e);
                }
                if max == T::neg_infinity() {
                    // nothing to attend to: zero context
                    p.row_mut(i).iter_mut().for_each(|a| *a = T::zero());
                    continue;
                }
                let mut z = T::zero();
                for a in p.row_mut(i) {
                    *a = if a.is_finite() { (*a - max).exp() } else { T::zero() };
                    z = z + *a;
                }
                p.row_mut(i).iter_mut().for_each(|a| *a = *a / z);
                let orow = &mut out.row_mut(i)[cs.clone()];
                for j in 0..lk {
                    let a = p[(i, j)];
                    if a == T::zero() {
                        continue;
                    }
                    vr.copy_from_slice(&vv.row(j)[cs.clone()]);
                    if let Some((_, rv, clip)) = rel {
                        axpy(T::one(), rv.row(rel_index(i, j, clip)), &mut vr);
                    }
                    axpy(a, &vr, orow);
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, spec, probs })
    }

    /// Scores against embedding rows `allowed`: x · E[allowed]ᵀ.
    pub fn tied_logits(&mut self, x: NodeId, allowed: &[usize]) -> NodeId {
        let e = self.emb;
        let xv = self.value(x);
        let mut v = Mat::zeros(xv.rows(), allowed.len());
        for i in 0..xv.rows() {
            let xi = xv.row(i);
            for (c, &t) in allowed.iter().enumerate() {
                v[(i, c)] = dot(xi, e.row(t));
            }
        }
        self.push(v, Op::TiedLogits { x, allowed: allowed.to_vec() })
    }

    /// Summed label-smoothed cross-entropy; `gold[i]` is a column of `logits`.
    pub fn softmax_xent(&mut self, logits: NodeId, gold: &[usize], eps: T) -> Result<NodeId> {
        let lv = self.value(logits);
        let mut d = Mat::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (i, &g) in gold.iter().enumerate() {
            let (l, grad) = loss_softmax(lv.row(i), g, eps)?;
            total = total + l;
            d.row_mut(i).copy_from_slice(&grad);
        }
        Ok(self.push(Mat::from_vec(1, 1, vec![total]), Op::SoftmaxXent { logits, dlogits: d }))
    }

    /// Summed vMF loss of each row of `yhat` against the unit-normalized
    /// embedding row of the matching target token.
    pub fn vmf(&mut self, yhat: NodeId, targets: &[usize], lambda: T) -> NodeId {
        let mut units = self.emb.select_rows(targets);
        let mut norms = Vec::with_capacity(targets.len());
        for i in 0..units.rows() {
            let n = crate::tensor::norm(units.row(i));
            if n > T::zero() {
                units.row_mut(i).iter_mut().for_each(|v| *v = *v / n);
            }
            norms.push(n);
        }
        let yv = self.value(yhat);
        let mut d = Mat::zeros(yv.rows(), yv.cols());
        let mut total = T::zero();
        for i in 0..yv.rows() {
            let (l, g) = loss_vmf(yv.row(i), units.row(i), lambda);
            total = total + l;
            d.row_mut(i).copy_from_slice(&g);
        }
        let op = Op::Vmf { yhat, dyhat: d, targets: targets.to_vec(), units, norms, lambda };
        self.push(Mat::from_vec(1, 1, vec![total]), op)
    }

    /// Gradients of the scalar node `root` (scaled by `seed`).
    pub fn backward(&self, root: NodeId, seed: T) -> Gradients<T> {
        let mut grads = Gradients::empty(self.params.len());
        let mut adj: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root] = Some(Mat::from_vec(1, 1, vec![seed]));

        fn acc<T: Scalar>(adj: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
            match &mut adj[id] {
                Some(a) => a.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(dy) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Embed { tokens, scale } => {
                    for (p, &t) in tokens.iter().enumerate() {
                        if self.trainable_rows.get(t).copied().unwrap_or(false) {
                            let g: Vec<T> = dy.row(p).iter().map(|&v| v * *scale).collect();
                            grads.accumulate_row(t, &g);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let wv = self.params.value(*w);
                    acc(&mut adj, *x, dy.matmul_t(wv));
                    if self.params.is_trainable(*w) {
                        grads.accumulate_dense(*w, &self.value(*x).t_matmul(&dy));
                    }
                    if self.params.is_trainable(*b) {
                        let mut gb = Mat::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            axpy(T::one(), dy.row(i), gb.row_mut(0));
                        }
                        grads.accumulate_dense(*b, &gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, dy.clone());
                    acc(&mut adj, *a, dy);
                }
                Op::Relu(x) => {
                    let mut g = dy;
                    for (gi, &xi) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    acc(&mut adj, *x, g);
                }
                Op::Dropout { x, mask } => {
                    let mut g = dy;
                    g.data_mut().iter_mut().zip(mask).for_each(|(a, &m)| *a = *a * m);
                    acc(&mut adj, *x, g);
                }
                Op::LayerNorm { x, g, b, xhat, rstd } => {
                    let gain = self.params.value(*g).row(0);
                    let (rows, cols) = dy.shape();
                    let n = T::of(cols as f64);
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..rows {
                        let (dyr, xh) = (dy.row(i), xhat.row(i));
                        let mut sum = T::zero();
                        let mut sum_x = T::zero();
                        for j in 0..cols {
                            let dxh = dyr[j] * gain[j];
                            sum = sum + dxh;
                            sum_x = sum_x + dxh * xh[j];
                            dg[(0, j)] = dg[(0, j)] + dyr[j] * xh[j];
                            db[(0, j)] = db[(0, j)] + dyr[j];
                        }
                        for j in 0..cols {
                            let dxh = dyr[j] * gain[j];
                            dx[(i, j)] = rstd[i] / n * (n * dxh - sum - xh[j] * sum_x);
                        }
                    }
                    acc(&mut adj, *x, dx);
                    if self.params.is_trainable(*g) {
                        grads.accumulate_dense(*g, &dg);
                    }
                    if self.params.is_trainable(*b) {
                        grads.accumulate_dense(*b, &db);
                    }
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv, drel) = self.attention_backward(*q, *k, *v, spec, probs, &dy);
                    acc(&mut adj, *q, dq);
                    acc(&mut adj, *k, dk);
                    acc(&mut adj, *v, dv);
                    if let (Some((rk, rv, _)), Some((gk, gv))) = (spec.rel, drel) {
                        if self.params.is_trainable(rk) {
                            grads.accumulate_dense(rk, &gk);
                        }
                        if self.params.is_trainable(rv) {
                            grads.accumulate_dense(rv, &gv);
                        }
                    }
                }
                Op::TiedLogits { x, allowed } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        for (c, &t) in allowed.iter().enumerate() {
                            let gc = dy[(i, c)];
                            if gc != T::zero() {
                                axpy(gc, self.emb.row(t), dx.row_mut(i));
                            }
                        }
                    }
                    for (c, &t) in allowed.iter().enumerate() {
                        if self.trainable_rows.get(t).copied().unwrap_or(false) {
                            let mut g = vec![T::zero(); xv.cols()];
                            for i in 0..xv.rows() {
                                axpy(dy[(i, c)], xv.row(i), &mut g);
                            }
                            grads.accumulate_row(t, &g);
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::SoftmaxXent { logits, dlogits } => {
                    let mut g = dlogits.clone();
                    g.scale(dy[(0, 0)]);
                    acc(&mut adj, *logits, g);
                }
                Op::Vmf { yhat, dyhat, targets, units, norms, lambda } => {
                    let mut g = dyhat.clone();
                    g.scale(dy[(0, 0)]);
                    acc(&mut adj, *yhat, g);
                    // trainable target rows (EOS) also move, through the normalization
                    let yv = self.value(*yhat);
                    for (i, &t) in targets.iter().enumerate() {
                        if !self.trainable_rows.get(t).copied().unwrap_or(false) || norms[i] <= T::zero() {
                            continue;
                        }
                        let (y, u) = (yv.row(i), units.row(i));
                        let s = -*lambda * dy[(0, 0)] / norms[i];
                        let proj = dot(y, u);
                        let g: Vec<T> = y.iter().zip(u).map(|(&yj, &uj)| s * (yj - proj * uj)).collect();
                        grads.accumulate_row(t, &g);
                    }
                }
            }
        }
        grads
    }

    #[allow(clippy::type_complexity)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: &AttnSpec,
        probs: &[Mat<T>],
        dy: &Mat<T>,
    ) -> (Mat<T>, Mat<T>, Mat<T>, Option<(Mat<T>, Mat<T>)>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        let dh = d / spec.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let rel = spec.rel.map(|(rk, rv, clip)| (self.params.value(rk), self.params.value(rv), clip));
        let mut dq = Mat::zeros(lq, d);
        let mut dk = Mat::zeros(lk, d);
        let mut dv = Mat::zeros(lk, d);
        let mut drel = rel.map(|(rk, rv, _)| (Mat::zeros(rk.rows(), dh), Mat::zeros(rv.rows(), dh)));
        let mut tmp = vec![T::zero(); dh];
        let mut da = vec![T::zero(); lk];
        for (h, p) in probs.iter().enumerate() {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..lq {
                let dyi = &dy.row(i)[cs.clone()];
                let mut s = T::zero();
                for j in 0..lk {
                    let a = p[(i, j)];
                    if a == T::zero() {
                        da[j] = T::zero();
                        continue;
                    }
                    tmp.copy_from_slice(&vv.row(j)[cs.clone()]);
                    if let Some((_, rv, clip)) = rel {
                        axpy(T::one(), rv.row(rel_index(i, j, clip)), &mut tmp);
                    }
                    da[j] = dot(dyi, &tmp);
                    s = s + a * da[j];
                    axpy(a, dyi, &mut dv.row_mut(j)[cs.clone()]);
                    if let (Some((_, _, clip)), Some((_, gv))) = (rel, drel.as_mut()) {
                        axpy(a, dyi, gv.row_mut(rel_index(i, j, clip)));
                    }
                }
                let qi: Vec<T> = qv.row(i)[cs.clone()].to_vec();
                for j in 0..lk {
                    let a = p[(i, j)];
                    if a == T::zero() {
                        continue;
                    }
                    let de = a * (da[j] - s) * scale;
                    tmp.copy_from_slice(&kv.row(j)[cs.clone()]);
                    if let Some((rk, _, clip)) = rel {
                        axpy(T::one(), rk.row(rel_index(i, j, clip)), &mut tmp);
                    }
                    axpy(de, &tmp, &mut dq.row_mut(i)[cs.clone()]);
                    axpy(de, &qi, &mut dk.row_mut(j)[cs.clone()]);
                    if let (Some((_, _, clip)), Some((gk, _))) = (rel, drel.as_mut()) {
                        axpy(de, &qi, gk.row_mut(rel_index(i, j, clip)));
                    }
                }
            }
        }
        (dq, dk, dv, drel)
    }
}
