//! Output losses: label-smoothed softmax cross-entropy and the von Mises-Fisher
//! loss against frozen embedding targets.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Scalar};

/// Floor on ‖ŷ‖ inside the vMF loss. Below it the log-normalizer is treated as
/// constant in κ, so the gradient of that term is zero.
pub const KAPPA_FLOOR: f64 = 1e-6;

/// Cross-entropy against q = (1−ε)·onehot(gold) + ε·uniform over the allowed
/// classes. Entries equal to −∞ are masked out; they get probability exactly 0.
/// Returns the loss and d loss / d logits.
pub fn loss_softmax<T: Scalar>(logits: &[T], gold: usize, eps: T) -> Result<(T, Vec<T>)> {
    let allowed = logits.iter().filter(|v| v.is_finite()).count();
    if gold >= logits.len() || !logits[gold].is_finite() {
        return Err(Error::Data(format!("gold class {gold} is outside the allowed set")));
    }
    let max = logits.iter().copied().filter(|v| v.is_finite()).fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().filter(|v| v.is_finite()).map(|&v| (v - max).exp()).sum();
    let log_z = max + z.ln();
    let uniform = eps / T::of(allowed as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (c, &l) in logits.iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        let log_p = l - log_z;
        let q = if c == gold { T::one() - eps + uniform } else { uniform };
        loss = loss - q * log_p;
        grad[c] = log_p.exp() - q;
    }
    Ok((loss, grad))
}

/// Probabilities under the same masking convention (masked entries are 0).
pub fn masked_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().filter(|v| v.is_finite()).fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| if v.is_finite() { (v - max).exp() } else { T::zero() }).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// −log C_m(κ) − λ·(ŷ·e) with κ = ‖ŷ‖, using the closed-form approximation
/// −log C_m(κ) ≈ √((m/2+1)² + κ²) − (m/2−1)·ln((m/2−1) + √((m/2+1)² + κ²)).
/// Returns the loss and d loss / d ŷ. `e` is expected to be unit length.
pub fn loss_vmf<T: Scalar>(yhat: &[T], e: &[T], lambda: T) -> (T, Vec<T>) {
    let m = yhat.len() as f64;
    let a = T::of(m / 2.0 - 1.0);
    let b = T::of(m / 2.0 + 1.0);
    let raw = norm(yhat);
    let kappa = raw.max(T::of(KAPPA_FLOOR));
    let s = (b * b + kappa * kappa).sqrt();
    let loss = s - a * (a + s).ln() - lambda * dot(yhat, e);
    // d/dκ of the normalizer term simplifies to κ / (a + S)
    let dk = if raw > T::of(KAPPA_FLOOR) { T::one() / (a + s) } else { T::zero() };
    let grad = yhat.iter().zip(e).map(|(&y, &t)| dk * y - lambda * t).collect();
    (loss, grad)
}
