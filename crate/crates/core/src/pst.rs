//! Pyramid scene transformer: three patch-transformer paths over the
//! bottleneck feature at decreasing grid sizes, a learned special token
//! that seeds the bin-width head, and fusion back to a 16-channel feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Initializer, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{BinPartition, DepthRange};

/// Channel count of the fused PST feature handed to the decoder.
pub const FUSED_CHANNELS: usize = 16;

/// Number of parallel paths.
pub const NUM_PATHS: usize = 3;

/// Stride and kernel of an adaptive embedding convolution: an unpadded
/// convolution that maps an `in_h x in_w` grid onto exactly `out_h x out_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AecGeometry {
    pub stride_y: usize,
    pub stride_x: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl AecGeometry {
    /// Output size of the sliding window `(in - kernel) / stride + 1`.
    pub fn sliding_output(&self) -> (usize, usize) {
        (
            (self.in_h - self.kernel_h) / self.stride_y + 1,
            (self.in_w - self.kernel_w) / self.stride_x + 1,
        )
    }
}

pub fn compute_aec_geometry(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<AecGeometry> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::validation("AEC dimensions must be positive"));
    }
    if out_h > in_h || out_w > in_w {
        return Err(Error::validation(format!(
            "AEC output {out_h}x{out_w} exceeds input {in_h}x{in_w}"
        )));
    }
    let stride_y = in_h / out_h;
    let stride_x = in_w / out_w;
    Ok(AecGeometry {
        stride_y,
        stride_x,
        kernel_h: in_h - stride_y * (out_h - 1),
        kernel_w: in_w - stride_x * (out_w - 1),
        in_h,
        in_w,
        out_h,
        out_w,
    })
}

/// Grid size of path `j` (1-based) for a bottleneck of `x5_h x x5_w`.
///
/// Each path halves the previous one; sizes that would round below one
/// cell are clamped to 1 and reported through the second return value.
pub fn path_target(x5_h: usize, x5_w: usize, j: usize) -> ((usize, usize), bool) {
    let div = 1usize << (j - 1);
    let (h, w) = (x5_h / div, x5_w / div);
    ((h.max(1), w.max(1)), h == 0 || w == 0)
}

/// Hyper-parameters of the pyramid scene transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PstConfig {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub num_bins: usize,
    pub tau: f64,
}

impl PstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_bins == 0 || self.in_channels == 0 || self.ff_mult == 0 {
            return Err(Error::Config("PST sizes must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn geometry(&self, j: usize) -> Result<AecGeometry> {
        let ((h, w), _) = path_target(self.in_h, self.in_w, j);
        compute_aec_geometry(self.in_h, self.in_w, h, w)
    }
}

/// Registers every PST parameter under `prefix`.
pub fn init_pst<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, cfg: &PstConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    for j in 1..=NUM_PATHS {
        let ((h, w), clamped) = path_target(cfg.in_h, cfg.in_w, j);
        if clamped {
            log::warn!(
                "PST path {j}: {}x{} bottleneck too small, grid clamped to {h}x{w}",
                cfg.in_h,
                cfg.in_w
            );
        }
        let geom = cfg.geometry(j)?;
        let p = format!("{prefix}.path{j}");
        init.conv(&format!("{p}.aec"), d, cfg.in_channels, geom.kernel_h, geom.kernel_w);
        init.embedding(&format!("{p}.pos"), &[h * w, d], 0.02);
        if j == 1 {
            init.embedding(&format!("{p}.special"), &[1, d], 0.02);
        }
        init_encoder(init, &format!("{p}.encoder"), cfg);
    }
    let f = FUSED_CHANNELS;
    init.conv(&format!("{prefix}.fuse.conv1"), f, NUM_PATHS * d, 3, 3);
    init.conv(&format!("{prefix}.fuse.conv2"), f, f, 3, 3);
    init.conv(&format!("{prefix}.fuse.conv3"), f, f, 1, 1);
    init.linear(&format!("{prefix}.bins.fc1"), d, d);
    init.linear(&format!("{prefix}.bins.fc2"), cfg.num_bins, d);
    // Positive raw widths at start: near-uniform bins with live gradients.
    init.set(&format!("{prefix}.bins.fc2.bias"), Tensor::full(&[cfg.num_bins], T::one()));
    Ok(())
}

fn init_encoder<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, cfg: &PstConfig) {
    let d = cfg.embed_dim;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        init.norm(&format!("{p}.ln1"), d);
        init.linear(&format!("{p}.attn.q"), d, d);
        init.linear(&format!("{p}.attn.k"), d, d);
        init.linear(&format!("{p}.attn.v"), d, d);
        init.linear(&format!("{p}.attn.out"), d, d);
        init.norm(&format!("{p}.ln2"), d);
        init.linear(&format!("{p}.ff1"), cfg.ff_mult * d, d);
        init.linear(&format!("{p}.ff2"), d, cfg.ff_mult * d);
    }
}

/// Adaptive embedding convolution of a `[C, H, W]` feature.
pub fn aec_embed<T: Scalar>(s: &mut Session<'_, T>, name: &str, feature: Var, geom: &AecGeometry) -> Result<Var> {
    let shape = s.graph.shape(feature).to_vec();
    if shape.len() != 3 || shape[1] != geom.in_h || shape[2] != geom.in_w {
        return Err(Error::shape(format!(
            "AEC geometry expects {}x{} input, feature is {:?}",
            geom.in_h, geom.in_w, shape
        )));
    }
    let w = s.store().get(&format!("{name}.weight")).map(|t| t.shape().to_vec());
    if w.as_deref().map(|w| (w[2], w[3])) != Some((geom.kernel_h, geom.kernel_w)) {
        return Err(Error::shape(format!("{name} kernel does not match geometry {geom:?}")));
    }
    Ok(s.conv(name, feature, (geom.stride_y, geom.stride_x), (0, 0)))
}

/// Pre-norm transformer encoder over a `[L, D]` token sequence.
pub fn transformer_encoder<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, tokens: Var, layers: usize, heads: usize) -> Var {
    let mut x = tokens;
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        let h = s.layer_norm(&format!("{p}.ln1"), x);
        let a = self_attention(s, &format!("{p}.attn"), h, heads);
        x = s.graph.add(x, a);
        let h = s.layer_norm(&format!("{p}.ln2"), x);
        let f = s.linear(&format!("{p}.ff1"), h);
        let f = s.graph.gelu(f);
        let f = s.linear(&format!("{p}.ff2"), f);
        x = s.graph.add(x, f);
    }
    x
}

/// Multi-head scaled dot-product self-attention without masking.
pub fn self_attention<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var, heads: usize) -> Var {
    let d = s.graph.shape(x)[1];
    let dh = d / heads;
    let q = s.linear(&format!("{prefix}.q"), x);
    let k = s.linear(&format!("{prefix}.k"), x);
    let v = s.linear(&format!("{prefix}.v"), x);
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.graph.slice_cols(q, h * dh, dh);
        let kh = s.graph.slice_cols(k, h * dh, dh);
        let vh = s.graph.slice_cols(v, h * dh, dh);
        let scores = s.graph.matmul_nt(qh, kh);
        let scores = s.graph.scale(scores, scale);
        let attn = s.graph.softmax_rows(scores);
        outs.push(s.graph.matmul(attn, vh));
    }
    let merged = s.graph.concat_cols(&outs);
    s.linear(&format!("{prefix}.out"), merged)
}

/// One path's outputs; `special` is present only for path 1.
#[derive(Debug, Clone, Copy)]
pub struct PathOutput {
    /// `[C_e, h_j, w_j]`
    pub grid: Var,
    /// `[1, C_e]`
    pub special: Option<Var>,
    /// Token count entering the encoder (grid cells plus the special token).
    pub seq_len: usize,
}

/// `[C, H, W] -> [H*W, C]`, row-major over cells.
pub(crate) fn grid_to_tokens<T: Scalar>(s: &mut Session<'_, T>, grid: Var) -> Var {
    let sh = s.graph.shape(grid).to_vec();
    let flat = s.graph.reshape(grid, &[sh[0], sh[1] * sh[2]]);
    s.graph.transpose(flat)
}

/// `[H*W, C] -> [C, H, W]`.
pub(crate) fn tokens_to_grid<T: Scalar>(s: &mut Session<'_, T>, tokens: Var, h: usize, w: usize) -> Var {
    let c = s.graph.shape(tokens)[1];
    let t = s.graph.transpose(tokens);
    s.graph.reshape(t, &[c, h, w])
}

pub fn path_forward<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x5: Var, j: usize, cfg: &PstConfig) -> Result<PathOutput> {
    if !(1..=NUM_PATHS).contains(&j) {
        return Err(Error::validation(format!("path index {j} not in 1..={NUM_PATHS}")));
    }
    let shape = s.graph.shape(x5).to_vec();
    if shape.len() != 3 || shape[1] != cfg.in_h || shape[2] != cfg.in_w {
        return Err(Error::shape(format!(
            "PST configured for {}x{} bottleneck, got {:?}",
            cfg.in_h, cfg.in_w, shape
        )));
    }
    let geom = cfg.geometry(j)?;
    let p = format!("{prefix}.path{j}");
    let emb = aec_embed(s, &format!("{p}.aec"), x5, &geom)?;
    let tokens = grid_to_tokens(s, emb);
    let pos = s.p(&format!("{p}.pos"));
    let mut seq = s.graph.add(tokens, pos);
    let cells = geom.out_h * geom.out_w;
    if j == 1 {
        let special = s.p(&format!("{p}.special"));
        seq = s.graph.concat(&[special, seq]);
    }
    let seq_len = s.graph.shape(seq)[0];
    let out = transformer_encoder(s, &format!("{p}.encoder"), seq, cfg.layers, cfg.heads);
    let (special, grid_tokens) = if j == 1 {
        (Some(s.graph.slice(out, 0, 1)), s.graph.slice(out, 1, cells))
    } else {
        (None, out)
    };
    let grid = tokens_to_grid(s, grid_tokens, geom.out_h, geom.out_w);
    Ok(PathOutput { grid, special, seq_len })
}

/// Graph handles produced by [`pst_forward`].
#[derive(Debug, Clone, Copy)]
pub struct PstOutput {
    /// `[16, H5, W5]`
    pub fused: Var,
    /// `[3 * C_e, H5, W5]`, before compression.
    pub concat: Var,
    /// `[1, N_b]` head output before normalization.
    pub raw_widths: Var,
    /// `[1, N_b]`
    pub widths: Var,
    /// `[1, N_b]`
    pub centers: Var,
}

impl PstOutput {
    pub fn partition<T: Scalar>(&self, s: &Session<'_, T>, range: DepthRange<T>) -> Result<BinPartition<T>> {
        BinPartition::from_widths(s.graph.value(self.widths).data().to_vec(), range)
    }
}

pub fn pst_forward<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x5: Var, cfg: &PstConfig, range: DepthRange<T>) -> Result<PstOutput> {
    let mut grids = Vec::with_capacity(NUM_PATHS);
    let mut special = None;
    for j in 1..=NUM_PATHS {
        let out = path_forward(s, prefix, x5, j, cfg)?;
        special = special.or(out.special);
        grids.push(s.graph.resize(out.grid, cfg.in_h, cfg.in_w));
    }
    let concat = s.graph.concat(&grids);
    let f = s.conv_same(&format!("{prefix}.fuse.conv1"), concat);
    let f = s.graph.silu(f);
    let f = s.conv_same(&format!("{prefix}.fuse.conv2"), f);
    let f = s.graph.silu(f);
    let fused = s.conv_same(&format!("{prefix}.fuse.conv3"), f);

    let special = special.expect("path 1 yields the special token");
    let h = s.linear(&format!("{prefix}.bins.fc1"), special);
    let h = s.graph.gelu(h);
    let raw_widths = s.linear(&format!("{prefix}.bins.fc2"), h);
    if let Some(bad) = s.graph.value(raw_widths).data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("bin head produced {bad}")));
    }
    let widths = s.graph.normalize_widths(raw_widths, T::lit(cfg.tau));
    let centers = s.graph.bin_centers(widths, range);
    Ok(PstOutput { fused, concat, raw_widths, widths, centers })
}
