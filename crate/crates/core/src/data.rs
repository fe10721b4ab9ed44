//! Synthetic RGB-D scenes, on-disk RGB-D pairs and augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DepthMap, DepthRange, RgbImage};

/// Header line identifying a manifest file.
pub const MANIFEST_MAGIC: &str = "# danet-manifest v1";

/// An axis-aligned occluder drawn over the background plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub depth: f64,
}

/// How a sample came to be: generator parameters or source files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SceneMeta {
    Synthetic { seed: u64, near: f64, far: f64, objects: Vec<SceneObject> },
    File { image: PathBuf, depth: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample<T> {
    pub image: RgbImage<T>,
    pub depth: DepthMap<T>,
    pub meta: SceneMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, d_min: 0.0, d_max: 10.0, min_objects: 2, max_objects: 8 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config("synthetic scenes must be at least 2x2".into()));
        }
        DepthRange::new(self.d_min, self.d_max).map_err(|e| Error::Config(e.to_string()))?;
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

/// Deterministic lattice noise in `[-1, 1]`.
fn lattice_noise(a: u64, b: u64, c: u64) -> f64 {
    let mut h = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Renders a room-like scene: a floor-to-wall depth gradient plus
/// rectangular occluders at distinct depths, and an image whose shading
/// falls off with depth.
pub fn generate_scene<T: Scalar>(seed: u64, config: &SyntheticConfig) -> Result<SceneSample<T>> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let span = config.d_max - config.d_min;
    let lo = config.d_min + 0.05 * span;
    let hi = config.d_max - 0.05 * span;
    let inner = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let near = rng.gen_range(lo..lo + 0.35 * inner);
    let far = rng.gen_range(near + 0.3 * inner..=hi);
    let plane = |r: usize| far + (near - far) * r as f64 / (h - 1) as f64;

    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let oh = rng.gen_range((h / 8).max(1)..=(h * 2 / 5).max(1));
        let ow = rng.gen_range((w / 8).max(1)..=(w * 2 / 5).max(1));
        let row0 = rng.gen_range(0..=h - oh);
        let col0 = rng.gen_range(0..=w - ow);
        let (row1, col1) = (row0 + oh, col0 + ow);
        // In front of the wall behind it, and distinct from earlier objects.
        let limit = plane(row0).min(plane(row1 - 1));
        let mut depth = rng.gen_range(lo..limit.max(lo + 1e-3));
        for _ in 0..16 {
            if objects.iter().all(|o| (o.depth - depth).abs() > 0.02 * inner) {
                break;
            }
            depth = rng.gen_range(lo..limit.max(lo + 1e-3));
        }
        objects.push(SceneObject { row0, col0, row1, col1, depth: depth.min(limit) });
    }
    // Painter's order: nearer objects overwrite farther ones.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));

    let mut depth = vec![0.0f64; h * w];
    let mut region = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            depth[r * w + c] = plane(r);
        }
    }
    for &k in &order {
        let o = &objects[k];
        for r in o.row0..o.row1 {
            for c in o.col0..o.col1 {
                depth[r * w + c] = o.depth;
                region[r * w + c] = k + 1;
            }
        }
    }

    let colors: Vec<[f64; 3]> = (0..=objects.len())
        .map(|_| [rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0)])
        .collect();
    let mut pixels = vec![0.0f64; 3 * h * w];
    for i in 0..h * w {
        let (r, c) = ((i / w) as u64, (i % w) as u64);
        let shade = 1.0 - 0.7 * ((depth[i] - lo) / inner).clamp(0.0, 1.0);
        let tex = 0.06 * lattice_noise(seed, region[i] as u64 * 7919 + r / 4, c / 4) + 0.02 * lattice_noise(seed ^ 0xABCD, r, c);
        for ch in 0..3 {
            pixels[ch * h * w + i] = (colors[region[i]][ch] * shade + tex).clamp(0.0, 1.0);
        }
    }
    Ok(SceneSample {
        image: RgbImage::new(h, w, pixels.into_iter().map(T::lit).collect())?,
        depth: DepthMap::new(h, w, depth.into_iter().map(T::lit).collect())?,
        meta: SceneMeta::Synthetic { seed, near, far, objects },
    })
}

/// Augmentation draw: horizontal flip and per-channel color gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub gains: [f64; 3],
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, gains: [1.0; 3] };

    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(0.5);
        let gains = [rng.gen_range(0.8..=1.2), rng.gen_range(0.8..=1.2), rng.gen_range(0.8..=1.2)];
        Self { flip, gains }
    }
}

pub fn apply_augment<T: Scalar>(sample: &SceneSample<T>, params: &AugmentParams) -> SceneSample<T> {
    let (mut image, mut depth) = (sample.image.clone(), sample.depth.clone());
    if params.flip {
        image = image.flipped_horizontal();
        depth = depth.flipped_horizontal();
    }
    if params.gains != [1.0; 3] {
        image = image.scaled_channels(params.gains.map(T::lit));
    }
    SceneSample { image, depth, meta: sample.meta.clone() }
}

/// Seeded flip (p = 0.5) plus color gains in `[0.8, 1.2]`; depth is only flipped.
pub fn augment<T: Scalar>(sample: &SceneSample<T>, seed: u64) -> SceneSample<T> {
    apply_augment(sample, &AugmentParams::draw(seed))
}

/// List of RGB / depth file pairs with the depth encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
    /// Meters per stored depth unit.
    pub scale: f64,
    pub range: DepthRange<f64>,
}

fn manifest_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Manifest { line, reason: reason.into() }
}

/// Parses a manifest. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
        _ => return Err(manifest_err(1, format!("expected header {MANIFEST_MAGIC:?}"))),
    }
    let (mut scale, mut range, mut entries) = (None, None, Vec::new());
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(v) = line.strip_prefix("scale=") {
            let s: f64 = v.trim().parse().map_err(|_| manifest_err(lineno, "bad scale"))?;
            if !(s > 0.0 && s.is_finite()) {
                return Err(manifest_err(lineno, "scale must be > 0"));
            }
            scale = Some(s);
        } else if let Some(v) = line.strip_prefix("range=") {
            let (a, b) = v.split_once(',').ok_or_else(|| manifest_err(lineno, "range needs d_min,d_max"))?;
            let (a, b): (f64, f64) = (
                a.trim().parse().map_err(|_| manifest_err(lineno, "bad d_min"))?,
                b.trim().parse().map_err(|_| manifest_err(lineno, "bad d_max"))?,
            );
            range = Some(DepthRange::new(a, b).map_err(|e| manifest_err(lineno, e.to_string()))?);
        } else {
            let (img, dep) = line
                .split_once('\t')
                .ok_or_else(|| manifest_err(lineno, "expected <image>\\t<depth>"))?;
            let (img, dep) = (base.join(img.trim()), base.join(dep.trim()));
            for p in [&img, &dep] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.display().to_string()));
                }
            }
            entries.push((img, dep));
        }
    }
    Ok(DatasetManifest {
        entries,
        scale: scale.ok_or_else(|| manifest_err(0, "missing scale= line"))?,
        range: range.ok_or_else(|| manifest_err(0, "missing range= line"))?,
    })
}

/// Writes a manifest; entry paths are stored as given.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_MAGIC}");
    let _ = writeln!(out, "scale={}", manifest.scale);
    let _ = writeln!(out, "range={},{}", manifest.range.d_min(), manifest.range.d_max());
    for (img, dep) in &manifest.entries {
        let _ = writeln!(out, "{}\t{}", img.display(), dep.display());
    }
    fs::write(path, out)?;
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    image::open(path).map_err(|e| Error::MalformedImage { path: path.display().to_string(), reason: e.to_string() })
}

pub fn read_sample<T: Scalar>(manifest: &DatasetManifest, index: usize) -> Result<SceneSample<T>> {
    let (img_path, depth_path) = manifest
        .entries
        .get(index)
        .ok_or_else(|| Error::validation(format!("sample {index} out of {}", manifest.entries.len())))?;
    let rgb = open_image(img_path)?.to_rgb8();
    let raw = open_image(depth_path)?;
    let depth16 = match raw {
        image::DynamicImage::ImageLuma16(d) => d,
        other => {
            return Err(Error::MalformedImage {
                path: depth_path.display().to_string(),
                reason: format!("expected 16-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    let (iw, ih) = (rgb.width() as usize, rgb.height() as usize);
    let (dw, dh) = (depth16.width() as usize, depth16.height() as usize);
    if (iw, ih) != (dw, dh) {
        return Err(Error::DimensionMismatch { image_h: ih, image_w: iw, depth_h: dh, depth_w: dw });
    }
    let plane = ih * iw;
    let mut pixels = vec![T::zero(); 3 * plane];
    for (i, p) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            pixels[ch * plane + i] = T::lit(p.0[ch] as f64 / 255.0);
        }
    }
    let tolerance = manifest.scale;
    let mut values = Vec::with_capacity(plane);
    let mut valid = Vec::with_capacity(plane);
    for p in depth16.pixels() {
        let raw = p.0[0];
        let d = raw as f64 * manifest.scale;
        if raw != 0 && (d > manifest.range.d_max() + tolerance || d < manifest.range.d_min() - tolerance) {
            return Err(Error::DepthOutOfRange { value: d, d_min: manifest.range.d_min(), d_max: manifest.range.d_max() });
        }
        values.push(T::lit(d));
        valid.push(raw != 0);
    }
    Ok(SceneSample {
        image: RgbImage::new(ih, iw, pixels)?,
        depth: DepthMap::with_mask(ih, iw, values, valid)?,
        meta: SceneMeta::File { image: img_path.clone(), depth: depth_path.clone() },
    })
}

pub fn write_rgb_png<T: Scalar>(image: &RgbImage<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image.get(c, y as usize, x as usize).to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Stores depth as `round(d / scale)` in a 16-bit PNG; invalid pixels as 0.
pub fn write_depth_png<T: Scalar>(depth: &DepthMap<T>, scale: f64, path: &Path) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = if depth.is_valid(r, c) {
                let q = (depth.get(r, c).to_f64_lossy() / scale).round();
                if q > u16::MAX as f64 {
                    return Err(Error::validation(format!("depth {} overflows 16 bits at scale {scale}", depth.get(r, c))));
                }
                (q as u16).max(1)
            } else {
                0
            };
            buf.put_pixel(c as u32, r as u32, Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes `<dir>/rgb/<name>.png` and `<dir>/depth/<name>.png`, returning
/// the paths relative to `dir`.
pub fn write_sample<T: Scalar>(sample: &SceneSample<T>, dir: &Path, name: &str, scale: f64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let rel_img = PathBuf::from("rgb").join(format!("{name}.png"));
    let rel_dep = PathBuf::from("depth").join(format!("{name}.png"));
    write_rgb_png(&sample.image, &dir.join(&rel_img))?;
    write_depth_png(&sample.depth, scale, &dir.join(&rel_dep))?;
    Ok((rel_img, rel_dep))
}
