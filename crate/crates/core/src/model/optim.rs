//! Adam / RAdam with noam or linear schedules, global-norm clipping and
//! decoupled weight decay. Frozen tensors never receive gradients, so they are
//! never touched here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// base · d^−½ · min(step^−½, step · warmup^−³ᐟ²)
    Noam { warmup: usize },
    /// Linear warmup to `base`, then linear decay to 0 at `total`.
    Linear { warmup: usize, total: usize },
    Constant,
}

impl Schedule {
    pub fn lr(&self, base: f64, d_model: usize, step: usize) -> f64 {
        let s = step.max(1) as f64;
        match *self {
            Schedule::Noam { warmup } => {
                let w = warmup.max(1) as f64;
                base * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
            Schedule::Linear { warmup, total } => {
                if step < warmup {
                    base * s / warmup as f64
                } else if total > warmup {
                    base * ((total as f64 - s) / (total - warmup) as f64).clamp(0.0, 1.0)
                } else {
                    base
                }
            }
            Schedule::Constant => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: Schedule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            schedule: Schedule::Noam { warmup: 4000 },
            learning_rate: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: None,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: usize,
    dense: BTreeMap<usize, Moments>,
    rows: BTreeMap<usize, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Per-step multipliers for the bias-corrected first moment.
fn step_factor(cfg: &OptimizerConfig, t: usize) -> (f64, f64, bool) {
    let t = t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    match cfg.kind {
        OptimizerKind::Adam => (1.0 / bc1, bc2, true),
        OptimizerKind::Radam => {
            let rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
            let rho = rho_inf - 2.0 * t * cfg.beta2.powf(t) / bc2;
            if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                (r / bc1, bc2, true)
            } else {
                // variance not yet tractable: un-adapted momentum step
                (1.0 / bc1, bc2, false)
            }
        }
    }
}

fn update_slice(p: &mut [f32], g: &[f32], mo: &mut Moments, cfg: &OptimizerConfig, lr: f64, f: (f64, f64, bool), gs: f64) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (m_scale, bc2, adaptive) = f;
    for i in 0..p.len() {
        let gi = g[i] as f64 * gs;
        let m = b1 * mo.m[i] as f64 + (1.0 - b1) * gi;
        let v = b2 * mo.v[i] as f64 + (1.0 - b2) * gi * gi;
        mo.m[i] = m as f32;
        mo.v[i] = v as f32;
        let mut delta = if adaptive { m * m_scale / ((v / bc2).sqrt() + cfg.eps) } else { m * m_scale };
        delta += cfg.weight_decay * p[i] as f64;
        p[i] = (p[i] as f64 - lr * delta) as f32;
    }
}

/// One optimizer step. Returns the learning rate used.
pub fn apply_update(
    params: &mut Parameters<f32>,
    emb: &mut Mat<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    d_model: usize,
) -> Result<f64> {
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::Training { tensor: name, msg: "non-finite gradient".into() });
    }
    state.step += 1;
    let lr = cfg.schedule.lr(cfg.learning_rate, d_model, state.step);
    let norm = (grads.sq_norm() as f64).sqrt();
    let gs = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let f = step_factor(cfg, state.step);
    for (id, g) in grads.dense.iter().enumerate() {
        let Some(g) = g else { continue };
        if !params.is_trainable(id) {
            continue;
        }
        let mo = state.dense.entry(id).or_insert_with(|| Moments::new(g.data().len()));
        let p = params.value_mut(id);
        update_slice(p.data_mut(), g.data(), mo, cfg, lr, f, gs);
        if !p.all_finite() {
            return Err(Error::Training { tensor: params.get(id).name.clone(), msg: "non-finite value after update".into() });
        }
    }
    for (&r, g) in &grads.rows {
        let mo = state.rows.entry(r).or_insert_with(|| Moments::new(g.len()));
        let row = emb.row_mut(r);
        update_slice(row, g, mo, cfg, lr, f, gs);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { tensor: format!("vocab.embedding[{r}]"), msg: "non-finite value after update".into() });
        }
    }
    Ok(lr)
}
