//! Relaxed CSLS refinement of a linear map.
//!
//! loss(W) = mean_i [ −2 cos(W x_i, y_i) + r_T(W x_i) + r_S(y_i) ], where the
//! penalty terms average the k best cosines against the target vocabulary
//! and against the mapped source vocabulary respectively. W is unconstrained.

use serde::{Deserialize, Serialize};

use super::csls::{top_k_indices, CslsParams};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{axpy, dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineOptions {
    pub epochs: usize,
    /// Initial step of the backtracking line search.
    pub learning_rate: f64,
    pub max_backtracks: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { epochs: 50, learning_rate: 1.0, max_backtracks: 30 }
    }
}

/// Unit-normalized inputs to the objective. `pairs` index rows of `src`/`tgt`.
pub(crate) struct Problem<'a> {
    pub src: &'a Mat<f64>,
    pub tgt: &'a Mat<f64>,
    pub pairs: &'a [(usize, usize)],
    pub params: CslsParams,
}

struct PairTerms {
    loss: f64,
    /// Gradient w.r.t. W x_i.
    g_x: Vec<f64>,
    /// Gradients w.r.t. W s_j for the source-side neighbors of y_i.
    g_s: Vec<(usize, Vec<f64>)>,
}

/// Adds `coef · d cos(u, v)/du` into `g`, given |u| and û.
fn cos_grad(g: &mut [f64], coef: f64, u_hat: &[f64], u_norm: f64, v: &[f64]) {
    let c = dot(u_hat, v);
    for ((gi, &vi), &ui) in g.iter_mut().zip(v).zip(u_hat) {
        *gi += coef * (vi - c * ui) / u_norm;
    }
}

fn map_row(w: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|a| a / n).collect(), n)
    }
}

impl Problem<'_> {
    fn pools(&self) -> (usize, usize) {
        let cap = |n: usize| self.params.candidate_pool.map_or(n, |p| p.min(n));
        (cap(self.src.rows()), cap(self.tgt.rows()))
    }

    pub fn check(&self) -> Result<()> {
        self.params.validate()?;
        if self.pairs.is_empty() {
            return Err(Error::Input("empty training dictionary".into()));
        }
        let (ps, pt) = self.pools();
        if self.params.k > ps || self.params.k > pt {
            return Err(Error::Config(format!("CSLS k = {} exceeds the neighbor pool", self.params.k)));
        }
        Ok(())
    }

    /// Loss and, if requested, its gradient for the current neighbor sets.
    pub fn evaluate(&self, w: &Mat<f64>, with_grad: bool) -> (f64, Option<Mat<f64>>) {
        let (ps, pt) = self.pools();
        let k = self.params.k;
        let m = w.rows();
        let mapped: Vec<(Vec<f64>, f64)> = exec::map_range(ps, |j| unit(&map_row(w, self.src.row(j))));

        let terms: Vec<PairTerms> = exec::map_range(self.pairs.len(), |i| {
            let (xi, yi) = self.pairs[i];
            let (u_hat, u_norm) = unit(&map_row(w, self.src.row(xi)));
            let y = self.tgt.row(yi);
            let c = dot(&u_hat, y);

            let to_t: Vec<f64> = (0..pt).map(|j| dot(&u_hat, self.tgt.row(j))).collect();
            let nt = top_k_indices(&to_t, k);
            let r_t = nt.iter().map(|&j| to_t[j]).sum::<f64>() / k as f64;

            let to_s: Vec<f64> = (0..ps).map(|j| dot(y, &mapped[j].0)).collect();
            let ns = top_k_indices(&to_s, k);
            let r_s = ns.iter().map(|&j| to_s[j]).sum::<f64>() / k as f64;

            let mut g_x = vec![0.0; m];
            let mut g_s = Vec::new();
            if with_grad && u_norm > 0.0 {
                cos_grad(&mut g_x, -2.0, &u_hat, u_norm, y);
                for &j in &nt {
                    cos_grad(&mut g_x, 1.0 / k as f64, &u_hat, u_norm, self.tgt.row(j));
                }
            }
            if with_grad {
                for &j in &ns {
                    let (s_hat, s_norm) = &mapped[j];
                    if *s_norm > 0.0 {
                        let mut g = vec![0.0; m];
                        cos_grad(&mut g, 1.0 / k as f64, s_hat, *s_norm, y);
                        g_s.push((j, g));
                    }
                }
            }
            PairTerms { loss: -2.0 * c + r_t + r_s, g_x, g_s }
        });

        let n = self.pairs.len() as f64;
        let loss = terms.iter().map(|t| t.loss).sum::<f64>() / n;
        if !with_grad {
            return (loss, None);
        }
        // dW = Σ g ⊗ x over every mapped row that received a gradient
        let mut grad = Mat::zeros(m, m);
        for (t, &(xi, _)) in terms.iter().zip(self.pairs) {
            outer_add(&mut grad, &t.g_x, self.src.row(xi), 1.0 / n);
            for (j, g) in &t.g_s {
                outer_add(&mut grad, g, self.src.row(*j), 1.0 / n);
            }
        }
        (loss, Some(grad))
    }
}

fn outer_add(dst: &mut Mat<f64>, g: &[f64], x: &[f64], scale: f64) {
    for (r, &gr) in g.iter().enumerate() {
        if gr != 0.0 {
            axpy(gr * scale, x, dst.row_mut(r));
        }
    }
}

/// Full-batch gradient descent with backtracking. Neighbor sets are refreshed
/// once per epoch (when the gradient is recomputed); trial steps are accepted
/// on the exact loss, so the recorded sequence never increases.
pub(crate) fn refine(problem: &Problem, w0: &Mat<f64>, opts: &RefineOptions) -> Result<(Mat<f64>, Vec<f64>)> {
    problem.check()?;
    let mut w = w0.clone();
    let (mut loss, grad) = problem.evaluate(&w, true);
    if !loss.is_finite() {
        return Err(Error::Diverged { iterations: 0, last_loss: loss });
    }
    let mut grad = grad.expect("gradient requested");
    let mut trace = vec![loss];
    let mut lr = opts.learning_rate;
    for epoch in 0..opts.epochs {
        let g2: f64 = grad.data().iter().map(|v| v * v).sum();
        if !g2.is_finite() {
            return Err(Error::Diverged { iterations: epoch, last_loss: loss });
        }
        if g2 < 1e-24 {
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial = w.clone();
            for (t, g) in trial.data_mut().iter_mut().zip(grad.data()) {
                *t -= lr * g;
            }
            let (l, _) = problem.evaluate(&trial, false);
            if l.is_finite() && l <= loss - 1e-4 * lr * g2 {
                accepted = Some((trial, l));
                break;
            }
            lr *= 0.5;
        }
        let Some((trial, l)) = accepted else { break };
        w = trial;
        loss = l;
        trace.push(loss);
        lr *= 2.0;
        let (_, g) = problem.evaluate(&w, true);
        grad = g.expect("gradient requested");
    }
    Ok((w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(n: usize, m: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let r = out.row_mut(i);
            r.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let nn = dot::<f64>(r, r).sqrt();
            r.iter_mut().for_each(|v| *v /= nn);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let src = random_unit(12, 4, 1);
        let tgt = random_unit(12, 4, 2);
        let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, i)).collect();
        let p = Problem { src: &src, tgt: &tgt, pairs: &pairs, params: CslsParams { k: 3, candidate_pool: None } };
        let mut w = Mat::identity(4);
        w[(0, 1)] = 0.3;
        w[(2, 0)] = -0.2;
        let (_, g) = p.evaluate(&w, true);
        let g = g.unwrap();
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..4 {
                let mut a = w.clone();
                a[(r, c)] += h;
                let mut b = w.clone();
                b[(r, c)] -= h;
                let fd = (p.evaluate(&a, false).0 - p.evaluate(&b, false).0) / (2.0 * h);
                // neighbor sets are piecewise constant; this W is away from ties
                assert!((fd - g[(r, c)]).abs() < 1e-5, "({r},{c}) {fd} vs {}", g[(r, c)]);
            }
        }
    }

    #[test]
    fn identical_spaces_are_a_zero_loss_fixed_point_for_k1() {
        let e = random_unit(30, 5, 3);
        let pairs: Vec<(usize, usize)> = (0..30).map(|i| (i, i)).collect();
        let p = Problem { src: &e, tgt: &e, pairs: &pairs, params: CslsParams { k: 1, candidate_pool: None } };
        let (l, _) = p.evaluate(&Mat::identity(5), false);
        assert!(l.abs() < 1e-12);
        let (w, trace) = refine(&p, &Mat::identity(5), &RefineOptions::default()).unwrap();
        assert!(p.evaluate(&w, false).0 <= 1e-6);
        assert!(trace.iter().all(|l| *l <= 1e-6));
    }

    #[test]
    fn loss_trace_never_increases() {
        let src = random_unit(60, 6, 4);
        let tgt = random_unit(60, 6, 5);
        let pairs: Vec<(usize, usize)> = (0..40).map(|i| (i, i)).collect();
        let p = Problem { src: &src, tgt: &tgt, pairs: &pairs, params: CslsParams { k: 5, candidate_pool: None } };
        let (_, trace) = refine(&p, &Mat::identity(6), &RefineOptions { epochs: 30, ..Default::default() }).unwrap();
        assert!(trace.len() > 2);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_start_reports_divergence() {
        let e = random_unit(10, 3, 6);
        let pairs = vec![(0, 0)];
        let p = Problem { src: &e, tgt: &e, pairs: &pairs, params: CslsParams { k: 1, candidate_pool: None } };
        let mut w = Mat::identity(3);
        w[(0, 0)] = f64::NAN;
        assert!(matches!(refine(&p, &w, &RefineOptions::default()), Err(Error::Diverged { .. })));
    }
}
