//! Bin-width normalization, bin centers and the probability-weighted depth
//! reconstruction, together with their vector-Jacobian products.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{BinProbabilityMap, DepthMap, DepthRange, SIMPLEX_TOLERANCE};

/// Default additive constant for width normalization.
pub const DEFAULT_TAU: f64 = 1e-3;

fn sum_tolerance<T: Scalar>(n: usize) -> T {
    T::lit(SIMPLEX_TOLERANCE).max(T::from_usize_lossy(n) * T::epsilon() * T::lit(4.0))
}

/// Turns raw head outputs into normalized widths: `(max(r, 0) + tau) / sum`.
///
/// Negative raw values are rectified to zero first.
pub fn normalize_bin_widths<T: Scalar>(raw: &[T], tau: T) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Err(Error::validation("need at least one raw width"));
    }
    if !(tau.is_finite() && tau > T::zero()) {
        return Err(Error::validation(format!("tau must be finite and > 0, got {tau}")));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite raw width {bad}")));
    }
    let shifted: Vec<T> = raw.iter().map(|&r| r.max(T::zero()) + tau).collect();
    let total = shifted.iter().fold(T::zero(), |a, &b| a + b);
    Ok(shifted.into_iter().map(|s| s / total).collect())
}

/// Gradient of a scalar objective w.r.t. the raw widths, given its gradient
/// w.r.t. the normalized widths.
pub fn normalize_bin_widths_vjp<T: Scalar>(raw: &[T], tau: T, grad_widths: &[T]) -> Vec<T> {
    let shifted: Vec<T> = raw.iter().map(|&r| r.max(T::zero()) + tau).collect();
    let total = shifted.iter().fold(T::zero(), |a, &b| a + b);
    let dot = shifted
        .iter()
        .zip(grad_widths)
        .fold(T::zero(), |acc, (&s, &g)| acc + s * g)
        / total;
    raw.iter()
        .zip(grad_widths)
        .map(|(&r, &g)| if r > T::zero() { (g - dot) / total } else { T::zero() })
        .collect()
}

/// `c_i = d_min + (d_max - d_min) * (b_i / 2 + sum_{j<i} b_j)`.
pub fn bin_centers<T: Scalar>(widths: &[T], range: &DepthRange<T>) -> Result<Vec<T>> {
    if widths.is_empty() {
        return Err(Error::validation("need at least one bin width"));
    }
    if let Some(bad) = widths.iter().find(|&&b| !(b.is_finite() && b > T::zero())) {
        return Err(Error::validation(format!("bin width {bad} is not positive")));
    }
    let total = widths.iter().fold(T::zero(), |a, &b| a + b);
    if (total - T::one()).abs() > sum_tolerance(widths.len()) {
        return Err(Error::validation(format!("bin widths sum to {total}, expected 1")));
    }
    let half = T::lit(0.5);
    let span = range.span();
    let mut before = T::zero();
    Ok(widths
        .iter()
        .map(|&b| {
            let c = range.d_min() + span * (b * half + before);
            before += b;
            c
        })
        .collect())
}

/// Gradient w.r.t. the widths given the gradient w.r.t. the centers.
pub fn bin_centers_vjp<T: Scalar>(range: &DepthRange<T>, grad_centers: &[T]) -> Vec<T> {
    let span = range.span();
    let half = T::lit(0.5);
    let mut after = T::zero();
    let mut out = vec![T::zero(); grad_centers.len()];
    for i in (0..grad_centers.len()).rev() {
        out[i] = span * (grad_centers[i] * half + after);
        after += grad_centers[i];
    }
    out
}

/// Per-pixel expectation of the bin centers under `probs`.
pub fn combine<T: Scalar>(probs: &BinProbabilityMap<T>, centers: &[T]) -> Result<DepthMap<T>> {
    if probs.bins() != centers.len() {
        return Err(Error::shape(format!(
            "probability map has {} bins but {} centers were given",
            probs.bins(),
            centers.len()
        )));
    }
    let plane = probs.height() * probs.width();
    let mut depth = vec![T::zero(); plane];
    for (n, &c) in centers.iter().enumerate() {
        let slice = &probs.probs()[n * plane..(n + 1) * plane];
        for (d, &p) in depth.iter_mut().zip(slice) {
            *d += p * c;
        }
    }
    DepthMap::new(probs.height(), probs.width(), depth)
}
