//! Central finite differences of the network loss, evaluated in f64.

use clwe_nmt::model::{loss_softmax, loss_vmf, Example, Gradients, HeadTarget, Model, Net, Parameters};
use clwe_nmt::tensor::{Mat, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A coordinate of either a dense parameter or a trainable embedding row.
#[derive(Debug, Clone, Copy)]
pub enum Coord {
    Param(usize, usize),
    Row(usize, usize),
}

pub fn sample_coords(model: &Model, rows: &[bool], n: usize, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<usize> = (0..rows.len()).filter(|&r| rows[r]).collect();
    let d = model.vocab.dim();
    (0..n)
        .map(|k| {
            if k % 5 == 4 {
                Coord::Row(trainable[rng.random_range(0..trainable.len())], rng.random_range(0..d))
            } else {
                let id = rng.random_range(0..model.params.len());
                Coord::Param(id, rng.random_range(0..model.params.value(id).data().len()))
            }
        })
        .collect()
}

pub fn grad_at<T: Scalar>(g: &Gradients<T>, c: Coord) -> f64 {
    match c {
        Coord::Param(id, i) => g.dense[id].as_ref().map_or(0.0, |m| m.data()[i].to_f64().unwrap()),
        Coord::Row(r, i) => g.rows.get(&r).map_or(0.0, |v| v[i].to_f64().unwrap()),
    }
}

fn loss_at(model: &Model, params: &Parameters<f64>, emb: &Mat<f64>, rows: &[bool], ex: &Example, target: &HeadTarget) -> f64 {
    let net = Net { cfg: &model.config, layout: model.layout(), params, emb, trainable_rows: rows };
    net.example_loss(ex, target, None, false).unwrap().loss
}

/// Central difference of the f64 loss at `c`.
pub fn numeric(model: &Model, rows: &[bool], ex: &Example, target: &HeadTarget, c: Coord, h: f64) -> f64 {
    let params: Parameters<f64> = model.params.cast();
    let emb: Mat<f64> = model.vocab.embedding.cast();
    let shifted = |delta: f64| {
        let (mut p, mut e) = (params.clone(), emb.clone());
        match c {
            Coord::Param(id, i) => p.value_mut(id).data_mut()[i] += delta,
            Coord::Row(r, i) => e.row_mut(r)[i] += delta,
        }
        loss_at(model, &p, &e, rows, ex, target)
    };
    (shifted(h) - shifted(-h)) / (2.0 * h)
}


pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub fn example(model: &Model) -> Example {
    model.example("aa", &super::words(&[1, 4, 2, 7, 3]), "bb", &super::words(&[5, 0, 6, 2])).unwrap()
}

pub fn target<'a>(model: &Model, allowed: &'a [usize]) -> HeadTarget<'a> {
    match model.config.head {
        clwe_nmt::model::HeadKind::Softmax => HeadTarget::Softmax { allowed, label_smoothing: 0.1 },
        clwe_nmt::model::HeadKind::Vmf => HeadTarget::Vmf { lambda: 0.2, allowed: None },
    }
}

/// Worst error over `n` sampled coordinates of the f64 backprop against f64 differences.
pub fn worst_f64(model: &Model, n: usize, seed: u64) -> f64 {
    let rows = model.trainable_rows();
    let ex = example(model);
    let allowed = model.vocab.target_mask("bb").unwrap().allowed;
    let target = target(model, &allowed);
    let params: Parameters<f64> = model.params.cast();
    let emb: Mat<f64> = model.vocab.embedding.cast();
    let net = Net { cfg: &model.config, layout: model.layout(), params: &params, emb: &emb, trainable_rows: &rows };
    let grads = net.example_loss(&ex, &target, None, true).unwrap().grads.unwrap();
    sample_coords(model, &rows, n, seed)
        .into_iter()
        .map(|c| rel_err(grad_at(&grads, c), numeric(model, &rows, &ex, &target, c, 1e-5)))
        .fold(0.0, f64::max)
}

/// Worst error of single-precision backprop against f64 differences of the
/// same network. Coordinates whose true gradient is zero (key biases, unused
/// relative positions) keep f32 rounding noise, hence the 1e-4 floor.
pub fn worst_f32(model: &Model, n: usize, seed: u64) -> f64 {
    let rows = model.trainable_rows();
    let ex = example(model);
    let allowed = model.vocab.target_mask("bb").unwrap().allowed;
    let target = target(model, &allowed);
    let grads = model.net(&rows).example_loss(&ex, &target, None, true).unwrap().grads.unwrap();
    sample_coords(model, &rows, n, seed)
        .into_iter()
        .map(|c| {
            let (a, n) = (grad_at(&grads, c), numeric(model, &rows, &ex, &target, c, 1e-5));
            (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
        })
        .fold(0.0, f64::max)
}

/// Worst error of `loss_softmax` over every allowed class of `draws` random
/// 7-class problems (one class masked), and the number of coordinates checked.
pub fn softmax_loss_worst(seed: u64, draws: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut worst, mut checked) = (0.0f64, 0);
    for _ in 0..draws {
        let mut logits: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        logits[rng.random_range(0..7)] = f64::NEG_INFINITY;
        let gold = (0..7).find(|&c| logits[c].is_finite()).unwrap();
        let (_, grad) = loss_softmax(&logits, gold, 0.1).unwrap();
        for c in 0..7 {
            if !logits[c].is_finite() {
                assert_eq!(grad[c], 0.0, "masked class has gradient");
                continue;
            }
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[c] += h;
            m[c] -= h;
            let n = (loss_softmax(&p, gold, 0.1).unwrap().0 - loss_softmax(&m, gold, 0.1).unwrap().0) / (2.0 * h);
            worst = worst.max(rel_err(grad[c], n));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Same for `loss_vmf` with m = 8 and a unit target.
pub fn vmf_loss_worst(seed: u64, draws: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut worst, mut checked) = (0.0f64, 0);
    for _ in 0..draws {
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut e: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter_mut().for_each(|v| *v /= n);
        let (_, grad) = loss_vmf(&y, &e, 0.2);
        for i in 0..8 {
            let (mut p, mut m) = (y.clone(), y.clone());
            p[i] += h;
            m[i] -= h;
            let num = (loss_vmf(&p, &e, 0.2).0 - loss_vmf(&m, &e, 0.2).0) / (2.0 * h);
            worst = worst.max(rel_err(grad[i], num));
            checked += 1;
        }
    }
    (worst, checked)
}
