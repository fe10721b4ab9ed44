//! Evaluation metrics and distribution-drift diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DepthMap, DepthRange};

/// Default histogram resolution.
pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

/// REL, RMS, log10 and threshold accuracies over the valid ground-truth pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StandardMetrics {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl StandardMetrics {
    pub const NAMES: [&'static str; 6] = ["rel", "rms", "log10", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 6] {
        [self.rel, self.rms, self.log10, self.delta1, self.delta2, self.delta3]
    }

    /// Element-wise mean over a set of per-sample metrics.
    pub fn mean(items: &[StandardMetrics]) -> StandardMetrics {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [rel, rms, log10, delta1, delta2, delta3] = acc.map(|a| a / n);
        StandardMetrics { rel, rms, log10, delta1, delta2, delta3 }
    }
}

pub fn standard_metrics<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<StandardMetrics> {
    pred.check_same_shape(gt)?;
    let thresholds = [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    let mut n = 0usize;
    let (mut rel, mut sq, mut l10) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&y, &g), &ok) in pred.values().iter().zip(gt.values()).zip(gt.mask()) {
        if !ok {
            continue;
        }
        let (y, g) = (y.to_f64_lossy(), g.to_f64_lossy());
        if !(y > 0.0 && g > 0.0) {
            return Err(Error::validation(format!("non-positive depth pair ({y}, {g})")));
        }
        n += 1;
        rel += (y - g).abs() / g;
        sq += (y - g) * (y - g);
        l10 += (y.log10() - g.log10()).abs();
        let ratio = (y / g).max(g / y);
        for (h, &t) in hits.iter_mut().zip(&thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::validation("no valid pixels to evaluate"));
    }
    let nf = n as f64;
    Ok(StandardMetrics {
        rel: rel / nf,
        rms: (sq / nf).sqrt(),
        log10: l10 / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// Normalized histogram of valid depths over a fixed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl DepthHistogram {
    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    /// Total variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &DepthHistogram) -> Result<f64> {
        if self.edges != other.edges {
            return Err(Error::shape("histograms use different edges"));
        }
        Ok(0.5 * self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// Bin index of `d` under uniform `edges`: half-open bins, the last one
/// closed, out-of-range values clamped to the end bins.
pub fn histogram_bin(edges: &[f64], d: f64) -> usize {
    let k = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[k]);
    let mut idx = (((d - lo) / (hi - lo)) * k as f64).floor().clamp(0.0, (k - 1) as f64) as usize;
    // Snap to the stored edges so rounding in the division never disagrees
    // with a direct comparison.
    while idx > 0 && d < edges[idx] {
        idx -= 1;
    }
    while idx + 1 < k && d >= edges[idx + 1] {
        idx += 1;
    }
    idx
}

pub fn histogram_edges<T: Scalar>(range: &DepthRange<T>, bins: usize) -> Vec<f64> {
    let (lo, hi) = (range.d_min().to_f64_lossy(), range.d_max().to_f64_lossy());
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect()
}

pub fn depth_histogram<T: Scalar>(depth: &DepthMap<T>, range: &DepthRange<T>, bins: usize) -> Result<DepthHistogram> {
    if bins == 0 {
        return Err(Error::validation("histogram needs at least one bin"));
    }
    let edges = histogram_edges(range, bins);
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    for d in depth.valid_values() {
        counts[histogram_bin(&edges, d.to_f64_lossy())] += 1;
        n += 1;
    }
    let mass = if n == 0 {
        vec![0.0; bins]
    } else {
        counts.into_iter().map(|c| c as f64 / n as f64).collect()
    };
    Ok(DepthHistogram { edges, mass })
}

/// Shape and range deviation of a prediction's depth distribution,
/// bundled with the standard metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub histogram_distance: f64,
    pub range_deviation: f64,
    pub metrics: StandardMetrics,
}

impl DriftReport {
    pub const FIELDS: [&'static str; 8] =
        ["histogram_distance", "range_deviation", "rel", "rms", "log10", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 8] {
        let m = self.metrics.values();
        [self.histogram_distance, self.range_deviation, m[0], m[1], m[2], m[3], m[4], m[5]]
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        Self::FIELDS.iter().zip(self.values()).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut vals = [f64::NAN; 8];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("expected key=value, got {line:?}")))?;
            let idx = Self::FIELDS
                .iter()
                .position(|f| *f == k.trim())
                .ok_or_else(|| Error::validation(format!("unknown drift field {k:?}")))?;
            vals[idx] = v.trim().parse().map_err(|_| Error::validation(format!("bad number {v:?}")))?;
        }
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::validation("drift record is missing fields"));
        }
        Ok(Self::from_values(vals))
    }

    fn from_values(v: [f64; 8]) -> Self {
        DriftReport {
            histogram_distance: v[0],
            range_deviation: v[1],
            metrics: StandardMetrics { rel: v[2], rms: v[3], log10: v[4], delta1: v[5], delta2: v[6], delta3: v[7] },
        }
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }

    /// Field-wise mean.
    pub fn mean(items: &[DriftReport]) -> DriftReport {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 8];
        for r in items {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Self::from_values(acc.map(|a| a / n))
    }
}

pub fn range_deviation<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<f64> {
    let (glo, ghi) = gt.valid_min_max().ok_or_else(|| Error::validation("ground truth has no valid pixels"))?;
    let (plo, phi) = pred
        .values()
        .iter()
        .zip(gt.mask())
        .filter(|(_, &ok)| ok)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
    Ok((plo - glo.to_f64_lossy()).abs() + (phi - ghi.to_f64_lossy()).abs())
}

pub fn drift_report<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, range: &DepthRange<T>, bins: usize) -> Result<DriftReport> {
    let metrics = standard_metrics(pred, gt)?;
    // The prediction's histogram is taken over the pixels the ground truth scores.
    let pred_masked = DepthMap::with_mask(pred.height(), pred.width(), pred.values().to_vec(), gt.mask().to_vec())?;
    let hp = depth_histogram(&pred_masked, range, bins)?;
    let hg = depth_histogram(gt, range, bins)?;
    Ok(DriftReport {
        histogram_distance: hp.total_variation(&hg)?,
        range_deviation: range_deviation(pred, gt)?,
        metrics,
    })
}

/// Signed per-pixel error `pred - gt` (zero at invalid pixels).
pub fn error_map<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<Vec<T>> {
    pred.check_same_shape(gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.mask())
        .map(|((&y, &g), &ok)| if ok { y - g } else { T::zero() })
        .collect())
}
