//! Shared domain types: depth maps, depth ranges, bin partitions and
//! per-pixel bin probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance for "sums to one" checks on widths and probabilities.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// An `H x W` grid of metric depths with a validity mask.
///
/// Values under an invalid mask entry are unconstrained (conventionally 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    /// Fully valid map; every value must be finite and strictly positive.
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::with_mask(height, width, values, valid)
    }

    pub fn with_mask(height: usize, width: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("depth map must be at least 1x1"));
        }
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(format!(
                "depth map {}x{} needs {} values, got {} values and {} mask entries",
                height,
                width,
                height * width,
                values.len(),
                valid.len()
            )));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v > T::zero()) {
                return Err(Error::validation(format!(
                    "depth at pixel {i} is {v}, expected finite and > 0"
                )));
            }
        }
        Ok(Self { height, width, values, valid })
    }

    /// Map with every pixel set to `value`.
    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values at valid pixels, in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().zip(&self.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v)
    }

    /// `(min, max)` over valid pixels, `None` when nothing is valid.
    pub fn valid_min_max(&self) -> Option<(T, T)> {
        self.valid_values().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    /// Same mask, new values. Values are revalidated at valid pixels.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::with_mask(self.height, self.width, values, self.valid.clone())
    }

    /// Mirror left/right.
    pub fn flipped_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        let mut valid = self.valid.clone();
        for r in 0..self.height {
            let row = r * self.width..(r + 1) * self.width;
            values[row.clone()].reverse();
            valid[row].reverse();
        }
        Self { height: self.height, width: self.width, values, valid }
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            valid: self.valid.clone(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "depth maps differ in size: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Closed metric interval `[d_min, d_max]` with `0 <= d_min < d_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange<T> {
    d_min: T,
    d_max: T,
}

impl<T: Scalar> DepthRange<T> {
    pub fn new(d_min: T, d_max: T) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite()) || d_min < T::zero() || d_min >= d_max {
            return Err(Error::validation(format!(
                "depth range [{d_min}, {d_max}] must satisfy 0 <= d_min < d_max"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn d_min(&self) -> T {
        self.d_min
    }

    pub fn d_max(&self) -> T {
        self.d_max
    }

    pub fn span(&self) -> T {
        self.d_max - self.d_min
    }

    pub fn contains(&self, d: T) -> bool {
        d >= self.d_min && d <= self.d_max
    }

    pub fn cast<U: Scalar>(&self) -> DepthRange<U> {
        DepthRange { d_min: U::lit(self.d_min.to_f64_lossy()), d_max: U::lit(self.d_max.to_f64_lossy()) }
    }
}

/// Normalized bin widths and the derived ascending bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition<T> {
    widths: Vec<T>,
    centers: Vec<T>,
    range: DepthRange<T>,
}

impl<T: Scalar> BinPartition<T> {
    /// Builds the partition from normalized widths, computing the centers.
    pub fn from_widths(widths: Vec<T>, range: DepthRange<T>) -> Result<Self> {
        let centers = crate::bins::bin_centers(&widths, &range)?;
        Ok(Self { widths, centers, range })
    }

    /// `n` equal-width bins over the range.
    pub fn uniform(n: usize, range: DepthRange<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("need at least one bin"));
        }
        Self::from_widths(vec![T::one() / T::from_usize_lossy(n); n], range)
    }

    pub fn widths(&self) -> &[T] {
        &self.widths
    }

    pub fn centers(&self) -> &[T] {
        &self.centers
    }

    pub fn range(&self) -> DepthRange<T> {
        self.range
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }
}

/// Per-pixel probability simplex over `bins` depth bins.
///
/// Stored bin-major (`[bins][height][width]`), the layout the network head
/// produces.
#[derive(Debug, Clone, PartialEq)]
pub struct BinProbabilityMap<T> {
    height: usize,
    width: usize,
    bins: usize,
    probs: Vec<T>,
}

impl<T: Scalar> BinProbabilityMap<T> {
    pub fn new(height: usize, width: usize, bins: usize, probs: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || bins == 0 {
            return Err(Error::validation("probability map dimensions must be positive"));
        }
        if probs.len() != height * width * bins {
            return Err(Error::shape(format!(
                "probability map {}x{}x{} needs {} entries, got {}",
                height,
                width,
                bins,
                height * width * bins,
                probs.len()
            )));
        }
        let plane = height * width;
        let tol = T::lit(SIMPLEX_TOLERANCE);
        for &p in &probs {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(Error::validation(format!("probability {p} outside [0, 1]")));
            }
        }
        for px in 0..plane {
            let sum = (0..bins).fold(T::zero(), |acc, n| acc + probs[n * plane + px]);
            if (sum - T::one()).abs() > tol {
                return Err(Error::validation(format!("probabilities at pixel {px} sum to {sum}")));
            }
        }
        Ok(Self { height, width, bins, probs })
    }

    /// Every pixel puts all of its mass on bin `k`.
    pub fn one_hot(height: usize, width: usize, bins: usize, k: usize) -> Result<Self> {
        if k >= bins {
            return Err(Error::validation(format!("bin {k} out of {bins}")));
        }
        let plane = height * width;
        let mut probs = vec![T::zero(); plane * bins];
        probs[k * plane..(k + 1) * plane].fill(T::one());
        Self::new(height, width, bins, probs)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// Probability of bin `n` at `(row, col)`.
    pub fn at(&self, row: usize, col: usize, n: usize) -> T {
        self.probs[n * self.height * self.width + row * self.width + col]
    }
}

/// Three-channel image with values in `[0, 1]`, stored channel-major
/// (`[3][height][width]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image must be at least 1x1"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "{}x{} RGB image needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::validation(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value of channel `c` at `(row, col)`.
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { height: self.height, width: self.width, data }
    }

    /// Multiplies channel `c` by `gains[c]`, clamping to `[0, 1]`.
    pub fn scaled_channels(&self, gains: [T; 3]) -> Self {
        let plane = self.height * self.width;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v * gains[i / plane]).max(T::zero()).min(T::one()))
            .collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}
