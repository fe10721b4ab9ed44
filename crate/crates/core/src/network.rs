//! Encoder / bottleneck / decoder network producing per-pixel bin
//! probabilities, with depth reconstructed as the probability-weighted
//! mean of the bin centers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bins::DEFAULT_TAU;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{norm_groups, Initializer, ParamStore, Session};
use crate::pst::{self, PstConfig, PstOutput, FUSED_CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{BinPartition, BinProbabilityMap, DepthMap, DepthRange, RgbImage};

/// Number of backbone levels.
pub const LEVELS: usize = 5;

/// Spatial size after `k` ceiling halvings.
pub fn halved(n: usize, k: usize) -> usize {
    (0..k).fold(n, |m, _| m.div_ceil(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub backbone_channels: [usize; LEVELS],
    pub num_bins: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_mult: usize,
    pub tau: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub use_pst: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 64,
            backbone_channels: [16, 24, 40, 80, 160],
            num_bins: 64,
            embed_dim: 32,
            heads: 4,
            encoder_layers: 2,
            ff_mult: 4,
            tau: DEFAULT_TAU,
            d_min: 0.0,
            d_max: 10.0,
            use_pst: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channel counts must be >= 1".into()));
        }
        if self.num_bins == 0 || self.num_bins > 256 {
            return Err(Error::Config(format!("num_bins must be in 1..=256, got {}", self.num_bins)));
        }
        if self.input_h < 2 || self.input_w < 2 {
            return Err(Error::Config("input must be at least 2x2".into()));
        }
        DepthRange::new(self.d_min, self.d_max).map_err(|e| Error::Config(e.to_string()))?;
        if self.use_pst {
            self.pst_config().validate()?;
        }
        Ok(())
    }

    pub fn range<T: Scalar>(&self) -> DepthRange<T> {
        DepthRange::new(T::lit(self.d_min), T::lit(self.d_max)).expect("validated range")
    }

    /// `(h, w)` of backbone level `i` (1-based).
    pub fn level_dims(&self, i: usize) -> (usize, usize) {
        (halved(self.input_h, i), halved(self.input_w, i))
    }

    pub fn pst_config(&self) -> PstConfig {
        let (h5, w5) = self.level_dims(5);
        PstConfig {
            in_channels: self.backbone_channels[4],
            in_h: h5,
            in_w: w5,
            embed_dim: self.embed_dim,
            heads: self.heads,
            layers: self.encoder_layers,
            ff_mult: self.ff_mult,
            num_bins: self.num_bins,
            tau: self.tau,
        }
    }
}

/// Backbone outputs `x1..x5`, level `i` at `1/2^i` resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// Multi-level feature extractor feeding the decoder skips and the bottleneck.
pub trait Backbone {
    fn channels(&self) -> [usize; LEVELS];
    fn init<T: Scalar>(&self, init: &mut Initializer<'_, T>, prefix: &str);
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, prefix: &str, image: Var) -> Result<FeaturePyramid>;
}

/// Five stride-2 stages of 3x3 conv, group norm and SiLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyBackbone {
    pub channels: [usize; LEVELS],
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> [usize; LEVELS] {
        self.channels
    }

    fn init<T: Scalar>(&self, init: &mut Initializer<'_, T>, prefix: &str) {
        let mut in_c = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            init.conv(&format!("{prefix}.stage{}.conv", i + 1), c, in_c, 3, 3);
            init.norm(&format!("{prefix}.stage{}.norm", i + 1), c);
            in_c = c;
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, prefix: &str, image: Var) -> Result<FeaturePyramid> {
        let shape = s.graph.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("backbone expects [3,H,W], got {shape:?}")));
        }
        if halved(shape[1], LEVELS - 1) < 2 || halved(shape[2], LEVELS - 1) < 2 {
            return Err(Error::validation(format!(
                "{}x{} image is too small to halve {LEVELS} times",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut levels = [x; LEVELS];
        for (i, &c) in self.channels.iter().enumerate() {
            x = s.conv(&format!("{prefix}.stage{}.conv", i + 1), x, (2, 2), (1, 1));
            x = s.group_norm(&format!("{prefix}.stage{}.norm", i + 1), x, norm_groups(c));
            x = s.graph.silu(x);
            levels[i] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// Four 16-channel skip features, finest first.
    pub skips: [Var; 4],
    /// `[16, H5, W5]`
    pub bottleneck: Var,
    /// `[16, H1, W1]`
    pub decoded: Var,
    /// `[N_b, H1, W1]`
    pub probs: Var,
    /// `[1, N_b]`
    pub centers: Var,
    /// `[H1, W1]`
    pub depth_half: Var,
    /// `[H, W]`
    pub depth: Var,
    pub pst: Option<PstOutput>,
}

/// Inference results at the input resolution.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub depth: DepthMap<T>,
    pub probs: BinProbabilityMap<T>,
    pub bins: BinPartition<T>,
}

/// The full depth network with its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DaNet<T> {
    config: NetworkConfig,
    backbone: ToyBackbone,
    params: ParamStore<T>,
}

pub fn init_fcb<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, in_c: usize) {
    init.conv(&format!("{name}.conv3"), FUSED_CHANNELS, in_c, 3, 3);
    init.conv(&format!("{name}.conv1"), FUSED_CHANNELS, FUSED_CHANNELS, 1, 1);
}

/// Feature compression block: 3x3 conv, SiLU, 1x1 conv down to 16 channels.
pub fn fcb_forward<T: Scalar>(s: &mut Session<'_, T>, name: &str, x: Var) -> Var {
    let h = s.conv_same(&format!("{name}.conv3"), x);
    let h = s.graph.silu(h);
    s.conv_same(&format!("{name}.conv1"), h)
}

pub fn init_decoder<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str) {
    for stage in 1..=4 {
        for k in 1..=3 {
            init.conv(&format!("{prefix}.stage{stage}.conv{k}"), FUSED_CHANNELS, FUSED_CHANNELS, 3, 3);
        }
    }
}

/// Four x2 up-scaling stages; each upsamples to its skip's size, adds the
/// skip and applies a three-conv residual fusion. `skips` are ordered from
/// the coarsest (level 4) to the finest (level 1).
pub fn decoder_forward<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, fused: Var, skips: &[Var; 4]) -> Result<Var> {
    let mut x = fused;
    for (stage, &skip) in skips.iter().enumerate() {
        let xs = s.graph.shape(x).to_vec();
        let ss = s.graph.shape(skip).to_vec();
        if ss.len() != 3 || ss[0] != xs[0] || ss[1] < xs[1] || ss[2] < xs[2] || ss[1] > 2 * xs[1] || ss[2] > 2 * xs[2] {
            return Err(Error::shape(format!(
                "decoder stage {}: skip {:?} does not match x2 upscale of {:?}",
                stage + 1,
                ss,
                xs
            )));
        }
        let up = s.graph.resize(x, ss[1], ss[2]);
        let sum = s.graph.add(up, skip);
        let p = format!("{prefix}.stage{}", stage + 1);
        let h = s.conv_same(&format!("{p}.conv1"), sum);
        let h = s.graph.silu(h);
        let h = s.conv_same(&format!("{p}.conv2"), h);
        let h = s.graph.silu(h);
        let h = s.conv_same(&format!("{p}.conv3"), h);
        x = s.graph.add(sum, h);
    }
    Ok(x)
}

impl<T: Scalar> DaNet<T> {
    /// Builds a network with seeded random initialization.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = ToyBackbone { channels: config.backbone_channels };
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, ChaCha8Rng::seed_from_u64(seed));
        backbone.init(&mut init, "backbone");
        for i in 1..=4 {
            init_fcb(&mut init, &format!("fcb{i}"), config.backbone_channels[i - 1]);
        }
        if config.use_pst {
            pst::init_pst(&mut init, "pst", &config.pst_config())?;
        } else {
            init_fcb(&mut init, "bottleneck", config.backbone_channels[4]);
        }
        init_decoder(&mut init, "decoder");
        init.conv("head", config.num_bins, FUSED_CHANNELS, 1, 1);
        Ok(Self { config, backbone, params })
    }

    /// Reassembles a network from stored parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let template = DaNet::<T>::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, backbone: template.backbone, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> DaNet<U> {
        DaNet { config: self.config.clone(), backbone: self.backbone, params: self.params.cast() }
    }

    /// Records a full forward pass on `s`.
    pub fn forward(&self, s: &mut Session<'_, T>, image: &RgbImage<T>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if image.height() != cfg.input_h || image.width() != cfg.input_w {
            return Err(Error::shape(format!(
                "network built for {}x{} input, got {}x{}",
                cfg.input_h,
                cfg.input_w,
                image.height(),
                image.width()
            )));
        }
        let x = s.graph.constant(Tensor::new(&[3, image.height(), image.width()], image.data().to_vec()));
        let pyramid = self.backbone.forward(s, "backbone", x)?;
        let skips = [1, 2, 3, 4].map(|i| fcb_forward(s, &format!("fcb{i}"), pyramid.levels[i - 1]));
        let range = cfg.range::<T>();
        let x5 = pyramid.levels[4];
        let (bottleneck, centers, pst_out) = if cfg.use_pst {
            let out = pst::pst_forward(s, "pst", x5, &cfg.pst_config(), range)?;
            (out.fused, out.centers, Some(out))
        } else {
            let fused = fcb_forward(s, "bottleneck", x5);
            let uniform = BinPartition::uniform(cfg.num_bins, range)?;
            let c = s.graph.constant(Tensor::new(&[1, cfg.num_bins], uniform.centers().to_vec()));
            (fused, c, None)
        };
        let decoded = decoder_forward(s, "decoder", bottleneck, &[skips[3], skips[2], skips[1], skips[0]])?;
        let logits = s.conv_same("head", decoded);
        let ds = s.graph.shape(decoded).to_vec();
        let (h1, w1) = (ds[1], ds[2]);
        let probs = s.graph.softmax(logits, 1, cfg.num_bins, h1 * w1);
        let flat = s.graph.reshape(probs, &[cfg.num_bins, h1 * w1]);
        let depth_flat = s.graph.matmul(centers, flat);
        let depth_half = s.graph.reshape(depth_flat, &[h1, w1]);
        let depth = s.graph.resize(depth_half, cfg.input_h, cfg.input_w);
        Ok(ForwardOutput { pyramid, skips, bottleneck, decoded, probs, centers, depth_half, depth, pst: pst_out })
    }

    /// Depth at input resolution, bin probabilities at half resolution and
    /// the image's bin partition.
    pub fn predict(&self, image: &RgbImage<T>) -> Result<Prediction<T>> {
        let mut s = Session::new(&self.params);
        let out = self.forward(&mut s, image)?;
        self.prediction_from(&s, &out)
    }

    pub fn prediction_from(&self, s: &Session<'_, T>, out: &ForwardOutput) -> Result<Prediction<T>> {
        let cfg = &self.config;
        let range = cfg.range::<T>();
        let bins = match &out.pst {
            Some(p) => p.partition(s, range)?,
            None => BinPartition::uniform(cfg.num_bins, range)?,
        };
        let ps = s.graph.shape(out.probs).to_vec();
        let probs = BinProbabilityMap::new(ps[1], ps[2], ps[0], s.graph.value(out.probs).data().to_vec())?;
        let values = s.graph.value(out.depth).data().to_vec();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("predicted depth {bad}")));
        }
        let depth = DepthMap::new(cfg.input_h, cfg.input_w, values)?;
        Ok(Prediction { depth, probs, bins })
    }
}
