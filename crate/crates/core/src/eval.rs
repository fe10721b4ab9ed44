//! Evaluation over a dataset and per-sample drift diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use serde::Serialize;

use crate::data::{write_depth_png, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::{depth_histogram, drift_report, error_map, DriftReport};
use crate::network::DaNet;
use crate::scalar::Scalar;
use crate::types::DepthMap;

/// Meters per unit of the predicted-depth PNG written by [`diagnose`].
pub const PREDICTION_PNG_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Score the ground truth against itself instead of running the network.
    pub passthrough: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: Vec<DriftReport>,
    pub mean: DriftReport,
    pub num_parameters: usize,
    pub use_pst: bool,
    pub histogram_bins: usize,
}

impl EvalReport {
    /// Header plus one row per sample.
    pub fn per_sample_csv(&self) -> String {
        let mut out = format!("sample,{}\n", DriftReport::csv_header());
        for (i, r) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", r.csv_row());
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "samples={}\nparameters={}\nuse_pst={}\nhistogram_bins={}\n",
            self.samples.len(),
            self.num_parameters,
            self.use_pst,
            self.histogram_bins
        );
        out.push_str(&self.mean.to_kv());
        out
    }
}

fn predicted_depth<T: Scalar>(net: &DaNet<T>, sample: &SceneSample<T>, opts: EvalOptions) -> Result<DepthMap<T>> {
    if opts.passthrough {
        Ok(sample.depth.clone())
    } else {
        Ok(net.predict(&sample.image)?.depth)
    }
}

/// Per-sample drift reports and their mean.
pub fn evaluate<T: Scalar>(net: &DaNet<T>, dataset: &[SceneSample<T>], bins: usize, opts: EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let range = net.config().range::<T>();
    let samples = dataset
        .iter()
        .map(|s| drift_report(&predicted_depth(net, s, opts)?, &s.depth, &range, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: DriftReport::mean(&samples),
        samples,
        num_parameters: net.num_parameters(),
        use_pst: net.config().use_pst,
        histogram_bins: bins,
    })
}

/// Files written by [`diagnose`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub report: DriftReport,
    pub depth_png: PathBuf,
    pub error_png: PathBuf,
    pub histogram_csv: PathBuf,
    pub histogram_png: PathBuf,
    pub report_txt: PathBuf,
}

/// Diverging map: white at zero error, red where the prediction is too
/// far, blue where it is too near, saturating at `limit` meters.
pub fn error_map_rgb(err: &[f64], limit: f64) -> Vec<[u8; 3]> {
    err.iter()
        .map(|&e| {
            let t = if limit > 0.0 { (e / limit).clamp(-1.0, 1.0) } else { 0.0 };
            let fade = (255.0 * (1.0 - t.abs())).round() as u8;
            if t >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect()
}

fn save_rgb(path: &Path, w: usize, h: usize, pixels: &[[u8; 3]]) -> Result<()> {
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb(pixels[y as usize * w + x as usize]));
    buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Overlaid histogram bars: ground truth green, prediction red, overlap yellow.
fn histogram_rgb(gt: &[f64], pred: &[f64], bar: usize, height: usize) -> (usize, Vec<[u8; 3]>) {
    let width = gt.len() * bar;
    let peak = gt.iter().chain(pred).cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut px = vec![[255u8; 3]; width * height];
    for (k, (&g, &p)) in gt.iter().zip(pred).enumerate() {
        let gh = ((g / peak) * height as f64).round() as usize;
        let ph = ((p / peak) * height as f64).round() as usize;
        for row in 0..height {
            let level = height - row;
            let color = match (level <= gh, level <= ph) {
                (true, true) => [200, 200, 0],
                (true, false) => [0, 170, 0],
                (false, true) => [220, 0, 0],
                (false, false) => continue,
            };
            for x in k * bar..(k + 1) * bar {
                px[row * width + x] = color;
            }
        }
    }
    (width, px)
}

/// Writes the prediction, error map, histogram overlay and drift record
/// for one sample into `out_dir`.
pub fn diagnose<T: Scalar>(net: &DaNet<T>, sample: &SceneSample<T>, out_dir: &Path, bins: usize, opts: EvalOptions) -> Result<Diagnosis> {
    fs::create_dir_all(out_dir)?;
    let range = net.config().range::<T>();
    let pred = predicted_depth(net, sample, opts)?;
    let gt = &sample.depth;
    let report = drift_report(&pred, gt, &range, bins)?;

    let depth_png = out_dir.join("pred_depth.png");
    write_depth_png(&pred, PREDICTION_PNG_SCALE, &depth_png)?;

    let err: Vec<f64> = error_map(&pred, gt)?.into_iter().map(Scalar::to_f64_lossy).collect();
    let limit = 0.25 * range.span().to_f64_lossy();
    let error_png = out_dir.join("error_map.png");
    save_rgb(&error_png, gt.width(), gt.height(), &error_map_rgb(&err, limit))?;

    let masked = DepthMap::with_mask(pred.height(), pred.width(), pred.values().to_vec(), gt.mask().to_vec())?;
    let hp = depth_histogram(&masked, &range, bins)?;
    let hg = depth_histogram(gt, &range, bins)?;
    let mut csv = String::from("bin,lower,upper,gt,pred\n");
    for k in 0..bins {
        let _ = writeln!(csv, "{k},{},{},{},{}", hg.edges[k], hg.edges[k + 1], hg.mass[k], hp.mass[k]);
    }
    let histogram_csv = out_dir.join("histogram.csv");
    fs::write(&histogram_csv, csv)?;
    let bar = (400 / bins).max(1);
    let (w, px) = histogram_rgb(&hg.mass, &hp.mass, bar, 160);
    let histogram_png = out_dir.join("histogram.png");
    save_rgb(&histogram_png, w, 160, &px)?;

    let report_txt = out_dir.join("drift.txt");
    fs::write(&report_txt, report.to_kv())?;
    Ok(Diagnosis { report, depth_png, error_png, histogram_csv, histogram_png, report_txt })
}
