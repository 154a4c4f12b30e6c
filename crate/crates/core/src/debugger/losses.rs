//! Loss terms of the filter-alignment objective.

use crate::error::{Error, Result};
use crate::model::FilterActivationMap;
use crate::scalar::Scalar;

/// Probability clamp used by the cross-entropy.
pub const CE_EPSILON: f64 = 1e-7;

fn check_len<T>(bits: &FilterActivationMap, f: &[T]) -> Result<()> {
    if bits.len() != f.len() {
        return Err(Error::Usage(format!(
            "global set has {} filters, activation vector has {}",
            bits.len(),
            f.len()
        )));
    }
    Ok(())
}

/// `-Σ_k |bits[k] · f[k]|`: agreement with the class's global MC filters (non-positive).
pub fn loss_mc<T: Scalar>(bits: &FilterActivationMap, f: &[T]) -> Result<T> {
    check_len(bits, f)?;
    Ok(-bits
        .bits()
        .iter()
        .zip(f)
        .filter(|(b, _)| **b)
        .map(|(_, v)| v.abs())
        .sum::<T>())
}

/// `Σ_k |(1 - bits[k]) · f[k]|`: activation outside the global MC filters.
pub fn loss_nonmc<T: Scalar>(bits: &FilterActivationMap, f: &[T]) -> Result<T> {
    check_len(bits, f)?;
    Ok(bits
        .bits()
        .iter()
        .zip(f)
        .filter(|(b, _)| !**b)
        .map(|(_, v)| v.abs())
        .sum::<T>())
}

/// Gradient of `λ₁·loss_mc + λ₂·loss_nonmc` with respect to `f`
/// (subgradient 0 where `f[k] = 0`).
pub fn alignment_gradient<T: Scalar>(
    bits: &FilterActivationMap,
    f: &[T],
    lambda1: T,
    lambda2: T,
) -> Result<Vec<T>> {
    check_len(bits, f)?;
    Ok(bits
        .bits()
        .iter()
        .zip(f)
        .map(|(&b, &v)| {
            let sign = if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            if b {
                -lambda1 * sign
            } else {
                lambda2 * sign
            }
        })
        .collect())
}

/// Mean categorical cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn loss_ce<T: Scalar>(probabilities: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::Usage(format!(
            "cross-entropy needs a non-empty batch with one label per row ({} rows, {} labels)",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut total = T::zero();
    for (p, &y) in probabilities.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Usage(format!("label {y} outside {} classes", p.len())))?;
        total += -clamp_probability(py).ln();
    }
    Ok(total / T::lit(labels.len() as f64))
}

pub(crate) fn clamp_probability<T: Scalar>(p: T) -> T {
    if p.is_nan() {
        return p;
    }
    let eps = T::lit(CE_EPSILON);
    p.max(eps).min(T::one() - eps)
}

/// Combined objective. `loss_mc` is already non-positive, so it enters with a
/// plus sign and rewards agreement.
pub fn loss_d<T: Scalar>(ce: T, mc: T, nonmc: T, lambda1: T, lambda2: T) -> T {
    ce + lambda1 * mc + lambda2 * nonmc
}
