//! Pixel, bin and range losses plus the two-stage schedule configuration.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning
//! the analytic gradient, which the training graph records as a single
//! scalar node.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::DepthMap;

/// Cap on the ground-truth point set used by the chamfer bin loss.
pub const CHAMFER_MAX_POINTS: usize = 10_000;
/// Seed of the chamfer subsampler.
pub const CHAMFER_SEED: u64 = 0x5eed_c4a3;
/// Stabilizer of the square-root derivative in the pixel loss.
pub const SQRT_EPS: f64 = 1e-12;

/// How the per-pixel weights `lambda` of the pixel loss are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Zero,
    DepthRelated,
}

/// Loss coefficients of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub u: f64,
    pub v: f64,
    pub weight_mode: WeightMode,
}

impl StageConfig {
    /// Pixel-wise stage: `alpha = 10, beta = 0.1, gamma = 0, u = 0.85, lambda = 0`.
    pub fn local() -> Self {
        Self { alpha: 10.0, beta: 0.1, gamma: 0.0, u: 0.85, v: 0.0, weight_mode: WeightMode::Zero }
    }

    /// Range stage: adds the min-max loss and depth-related weights with `v = 1`.
    pub fn global() -> Self {
        Self { alpha: 10.0, beta: 0.1, gamma: 0.1, u: 0.85, v: 1.0, weight_mode: WeightMode::DepthRelated }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("v", self.v)] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        if !(0.0..=1.0).contains(&self.u) {
            return Err(Error::Config(format!("u must lie in [0, 1], got {}", self.u)));
        }
        Ok(())
    }
}

/// Per-pixel weights `lambda`, zero at invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> PixelWeights<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![T::zero(); height * width] }
    }
}

fn check_valid<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<usize> {
    pred.check_same_shape(gt)?;
    let mut n = 0;
    for ((&y, &g), &ok) in pred.values().iter().zip(gt.values()).zip(gt.mask()) {
        if !ok {
            continue;
        }
        if !(y > T::zero() && y.is_finite()) {
            return Err(Error::validation(format!("predicted depth {y} is not positive")));
        }
        if !(g > T::zero()) {
            return Err(Error::validation(format!("ground-truth depth {g} is not positive")));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation("no valid pixels"));
    }
    Ok(n)
}

/// Scale-invariant log loss with variance discount `u` and optional
/// per-pixel weights, over the valid pixels of `gt`.
pub fn ssi_loss<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, weights: Option<&PixelWeights<T>>, u: T) -> Result<T> {
    ssi_loss_with_grad(pred, gt, weights, u).map(|(l, _)| l)
}

/// [`ssi_loss`] and its gradient w.r.t. every predicted pixel (zero where
/// `gt` is invalid).
pub fn ssi_loss_with_grad<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    weights: Option<&PixelWeights<T>>,
    u: T,
) -> Result<(T, Vec<T>)> {
    let n = check_valid(pred, gt)?;
    if let Some(w) = weights {
        if w.values.len() != gt.len() {
            return Err(Error::shape("pixel weights do not match depth map"));
        }
    }
    let lambda = |i: usize| weights.map_or(T::zero(), |w| w.values[i]);
    let nf = T::from_usize_lossy(n);
    let mut h = vec![T::zero(); gt.len()];
    let mut sum = T::zero();
    for i in 0..gt.len() {
        if gt.mask()[i] {
            let hi = (lambda(i) + T::one()) * (pred.values()[i].ln() - gt.values()[i].ln());
            h[i] = hi;
            sum += hi;
        }
    }
    // Centered form of mean(h^2) - u * mean(h)^2.
    let mean = sum / nf;
    let spread = (0..gt.len())
        .filter(|&i| gt.mask()[i])
        .fold(T::zero(), |acc, i| acc + (h[i] - mean) * (h[i] - mean));
    let radicand = (spread / nf + (T::one() - u) * mean * mean).max(T::zero());
    let loss = radicand.sqrt();
    let dl_dr = T::one() / (T::lit(2.0) * (radicand + T::lit(SQRT_EPS)).sqrt());
    let two = T::lit(2.0);
    let grad = (0..gt.len())
        .map(|i| {
            if !gt.mask()[i] {
                return T::zero();
            }
            let dr_dh = two * (h[i] - mean) / nf + two * (T::one() - u) * mean / nf;
            dl_dr * dr_dh * (lambda(i) + T::one()) / pred.values()[i]
        })
        .collect();
    Ok((loss, grad))
}

/// The valid ground-truth depths used as the chamfer point set,
/// subsampled without replacement to at most [`CHAMFER_MAX_POINTS`].
pub fn chamfer_points<T: Scalar>(gt: &DepthMap<T>) -> Vec<T> {
    let all: Vec<T> = gt.valid_values().collect();
    if all.len() <= CHAMFER_MAX_POINTS {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CHAMFER_SEED);
    let mut idx = sample(&mut rng, all.len(), CHAMFER_MAX_POINTS).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Index of the entry of ascending `sorted` nearest to `x` (lower on ties).
fn nearest_sorted<T: Scalar>(sorted: &[T], x: T) -> usize {
    let hi = sorted.partition_point(|&s| s < x);
    if hi == 0 {
        0
    } else if hi == sorted.len() {
        hi - 1
    } else if x - sorted[hi - 1] <= sorted[hi] - x {
        hi - 1
    } else {
        hi
    }
}

/// Bidirectional chamfer distance between bin centers and the ground-truth
/// depth set.
pub fn chamfer_bin_loss<T: Scalar>(centers: &[T], gt: &DepthMap<T>) -> Result<T> {
    chamfer_bin_loss_with_grad(centers, gt).map(|(l, _)| l)
}

pub fn chamfer_bin_loss_with_grad<T: Scalar>(centers: &[T], gt: &DepthMap<T>) -> Result<(T, Vec<T>)> {
    chamfer_from_points(centers, &chamfer_points(gt))
}

/// Chamfer loss against an explicit point set.
pub fn chamfer_from_points<T: Scalar>(centers: &[T], points: &[T]) -> Result<(T, Vec<T>)> {
    if points.is_empty() {
        return Err(Error::validation("chamfer loss needs at least one ground-truth depth"));
    }
    if centers.is_empty() {
        return Err(Error::validation("chamfer loss needs at least one bin center"));
    }
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[a].partial_cmp(&centers[b]).expect("finite centers"));
    let sorted_c: Vec<T> = order.iter().map(|&i| centers[i]).collect();
    let mut sorted_x = points.to_vec();
    sorted_x.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));

    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); centers.len()];
    for &x in &sorted_x {
        let k = order[nearest_sorted(&sorted_c, x)];
        let d = centers[k] - x;
        loss += d * d;
        grad[k] += two * d;
    }
    for (i, &c) in centers.iter().enumerate() {
        let d = c - sorted_x[nearest_sorted(&sorted_x, c)];
        loss += d * d;
        grad[i] += two * d;
    }
    Ok((loss, grad))
}

fn sign_or_zero<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// L1 tie of the first and last centers to the ground-truth min and max.
pub fn minmax_loss<T: Scalar>(centers: &[T], gt: &DepthMap<T>) -> Result<T> {
    minmax_loss_with_grad(centers, gt).map(|(l, _)| l)
}

pub fn minmax_loss_with_grad<T: Scalar>(centers: &[T], gt: &DepthMap<T>) -> Result<(T, Vec<T>)> {
    let (lo, hi) = gt
        .valid_min_max()
        .ok_or_else(|| Error::validation("min-max loss needs at least one valid pixel"))?;
    if centers.is_empty() {
        return Err(Error::validation("min-max loss needs at least one bin center"));
    }
    let last = centers.len() - 1;
    let (d_lo, d_hi) = (centers[0] - lo, centers[last] - hi);
    let mut grad = vec![T::zero(); centers.len()];
    grad[0] += sign_or_zero(d_lo);
    grad[last] += sign_or_zero(d_hi);
    Ok((d_lo.abs() + d_hi.abs(), grad))
}

/// Lower median of the valid values.
pub fn lower_median<T: Scalar>(values: impl Iterator<Item = T>) -> Option<T> {
    let mut v: Vec<T> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Some(v[(v.len() - 1) / 2])
}

/// Weights growing linearly from 0 at the median depth to `v` at the
/// scene's minimum and maximum depth.
pub fn depth_related_weights<T: Scalar>(gt: &DepthMap<T>, v: T) -> PixelWeights<T> {
    let mut out = PixelWeights::zeros(gt.height(), gt.width());
    let (Some(med), Some((lo, hi))) = (lower_median(gt.valid_values()), gt.valid_min_max()) else {
        return out;
    };
    for ((w, &g), &ok) in out.values.iter_mut().zip(gt.values()).zip(gt.mask()) {
        if !ok {
            continue;
        }
        *w = if g <= med {
            let den = med - lo;
            if den > T::zero() { v * (med - g) / den } else { T::zero() }
        } else {
            let den = hi - med;
            if den > T::zero() { v * (g - med) / den } else { T::zero() }
        };
    }
    out
}

/// Each weighted term of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub bin: f64,
    pub minmax: f64,
    pub total: f64,
}

/// Total loss with its gradients w.r.t. the prediction and the centers.
#[derive(Debug, Clone)]
pub struct LossWithGrad<T> {
    pub breakdown: LossBreakdown,
    pub total: T,
    pub pixel: (T, Vec<T>),
    pub bin: (T, Vec<T>),
    pub minmax: (T, Vec<T>),
}

pub fn stage_weights<T: Scalar>(gt: &DepthMap<T>, stage: &StageConfig) -> Option<PixelWeights<T>> {
    match stage.weight_mode {
        WeightMode::Zero => None,
        WeightMode::DepthRelated => Some(depth_related_weights(gt, T::lit(stage.v))),
    }
}

/// `alpha * L_pixel + beta * L_bin + gamma * L_minmax`, reporting each term.
/// The raw (unweighted) term values are in the breakdown.
pub fn total_loss<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, centers: &[T], stage: &StageConfig) -> Result<LossBreakdown> {
    total_loss_with_grad(pred, gt, centers, stage).map(|l| l.breakdown)
}

pub fn total_loss_with_grad<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    centers: &[T],
    stage: &StageConfig,
) -> Result<LossWithGrad<T>> {
    stage.validate()?;
    let weights = stage_weights(gt, stage);
    let pixel = ssi_loss_with_grad(pred, gt, weights.as_ref(), T::lit(stage.u))?;
    let bin = chamfer_bin_loss_with_grad(centers, gt)?;
    let minmax = minmax_loss_with_grad(centers, gt)?;
    let total = T::lit(stage.alpha) * pixel.0 + T::lit(stage.beta) * bin.0 + T::lit(stage.gamma) * minmax.0;
    Ok(LossWithGrad {
        breakdown: LossBreakdown {
            pixel: pixel.0.to_f64_lossy(),
            bin: bin.0.to_f64_lossy(),
            minmax: minmax.0.to_f64_lossy(),
            total: total.to_f64_lossy(),
        },
        total,
        pixel,
        bin,
        minmax,
    })
}
