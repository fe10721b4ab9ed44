//! Two-stage (local, then global) training of [`DaNet`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Cursor};
use crate::data::{self, augment, generate_scene, SceneSample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, LossBreakdown, StageConfig, WeightMode};
use crate::network::{DaNet, NetworkConfig};
use crate::nn::Session;
use crate::optim::{AdamState, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::DepthMap;

/// Where training and evaluation samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated scenes at the network's input size and depth range.
    Synthetic {
        count: usize,
        seed: u64,
        #[serde(default = "default_min_objects")]
        min_objects: usize,
        #[serde(default = "default_max_objects")]
        max_objects: usize,
    },
    Manifest { path: std::path::PathBuf },
}

fn default_min_objects() -> usize {
    SyntheticConfig::default().min_objects
}

fn default_max_objects() -> usize {
    SyntheticConfig::default().max_objects
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { count: 240, seed: 0, min_objects: default_min_objects(), max_objects: default_max_objects() }
    }
}

/// Seed of the `index`-th scene of a synthetic dataset.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    mix(&[seed, index as u64, 0x5CE7E])
}

/// Materializes `source` for a network built with `network`.
pub fn load_dataset<T: Scalar>(source: &DatasetSource, network: &NetworkConfig) -> Result<Vec<SceneSample<T>>> {
    let samples = match source {
        DatasetSource::Synthetic { count, seed, min_objects, max_objects } => {
            let cfg = SyntheticConfig {
                height: network.input_h,
                width: network.input_w,
                d_min: network.d_min,
                d_max: network.d_max,
                min_objects: *min_objects,
                max_objects: *max_objects,
            };
            (0..*count).map(|i| generate_scene(scene_seed(*seed, i), &cfg)).collect::<Result<Vec<_>>>()?
        }
        DatasetSource::Manifest { path } => {
            let manifest = data::load_manifest(path)?;
            (0..manifest.entries.len()).map(|i| data::read_sample(&manifest, i)).collect::<Result<Vec<_>>>()?
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, s) in samples.iter().enumerate() {
        if (s.depth.height(), s.depth.width()) != (network.input_h, network.input_w) {
            return Err(Error::Dataset(format!(
                "sample {i} is {}x{}, network expects {}x{}",
                s.depth.height(),
                s.depth.width(),
                network.input_h,
                network.input_w
            )));
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub loss: StageConfig,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { epochs: 10, loss: StageConfig::local() }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::local()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Random flips and color gains on training samples.
    pub augment: bool,
    pub local: StageSchedule,
    pub global: StageSchedule,
    pub optimizer: OptimizerConfig,
    pub network: NetworkConfig,
    pub dataset: DatasetSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 24,
            augment: true,
            local: StageSchedule { epochs: 10, loss: StageConfig::local() },
            global: StageSchedule { epochs: 10, loss: StageConfig::global() },
            optimizer: OptimizerConfig::default(),
            network: NetworkConfig::default(),
            dataset: DatasetSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.local.loss.validate()?;
        self.global.loss.validate()?;
        self.optimizer.validate()?;
        self.network.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        if let DatasetSource::Synthetic { min_objects, max_objects, .. } = self.dataset {
            if min_objects > max_objects {
                return Err(Error::Config(format!("object count range {min_objects}..={max_objects} is empty")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> [(Stage, &StageSchedule); 2] {
        [(Stage::Local, &self.local), (Stage::Global, &self.global)]
    }

    /// Schedule epoch used for the learning rate of `epoch` within `stage`.
    pub fn schedule_epoch(&self, stage: Stage, epoch: usize) -> usize {
        match stage {
            Stage::Global if !self.optimizer.reset_schedule_per_stage => self.local.epochs + epoch,
            _ => epoch,
        }
    }

    /// Human-readable summary of the schedule constants.
    pub fn header(&self) -> Vec<String> {
        let o = &self.optimizer;
        let mut lines = vec![
            format!(
                "optimizer: adam beta1={} beta2={} eps={} weight_decay={}",
                o.beta1, o.beta2, o.eps, o.weight_decay
            ),
            format!(
                "learning rate: {} x{} every {} epochs{}",
                o.lr,
                o.decay_factor,
                o.decay_every,
                if o.reset_schedule_per_stage { " (restarted per stage)" } else { "" }
            ),
            format!("batch size: {}  seed: {}  augment: {}", self.batch_size, self.seed, self.augment),
        ];
        for (stage, s) in self.stages() {
            let l = &s.loss;
            let lambda = match l.weight_mode {
                WeightMode::Zero => "zero".to_string(),
                WeightMode::DepthRelated => format!("depth_related v={}", l.v),
            };
            lines.push(format!(
                "stage {}: epochs={} alpha={} beta={} gamma={} u={} lambda={}",
                stage.name(),
                s.epochs,
                l.alpha,
                l.beta,
                l.gamma,
                l.u,
                lambda
            ));
        }
        let n = &self.network;
        lines.push(format!(
            "network: {}x{} bins={} embed={} heads={} layers={} pst={} range=[{}, {}]",
            n.input_h, n.input_w, n.num_bins, n.embed_dim, n.heads, n.encoder_layers, n.use_pst, n.d_min, n.d_max
        ));
        lines
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Local,
    Global,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Local => "local",
            Stage::Global => "global",
        }
    }
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,step,lr,pixel,bin,minmax,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.stage.name(),
            self.epoch,
            self.step,
            self.lr,
            self.loss.pixel,
            self.loss.bin,
            self.loss.minmax,
            self.loss.total
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// State dumped when a loss or gradient turns non-finite.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceDump {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub sample: usize,
    pub loss: LossBreakdown,
    pub non_finite_gradients: Vec<String>,
    pub largest_parameter: (String, f64),
}

/// Owns the network, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    config: TrainConfig,
    net: DaNet<T>,
    optim: AdamState<T>,
    cursor: Cursor,
    log: TrainLog,
}

/// Loss of one sample and the parameter gradients of its weighted total.
pub struct SampleGrad<T> {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Forward and backward pass of the stage loss on one sample.
pub fn sample_gradient<T: Scalar>(net: &DaNet<T>, sample: &SceneSample<T>, stage: &StageConfig) -> Result<SampleGrad<T>> {
    let mut s = Session::new(net.params());
    let out = net.forward(&mut s, &sample.image)?;
    let gt = &sample.depth;
    let values = s.graph.value(out.depth).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        let nan = LossBreakdown { pixel: f64::NAN, bin: f64::NAN, minmax: f64::NAN, total: f64::NAN };
        return Ok(SampleGrad { loss: nan, grads: BTreeMap::new() });
    }
    let pred = DepthMap::new(gt.height(), gt.width(), values)?;
    let centers = s.graph.value(out.centers).data().to_vec();
    let lw = total_loss_with_grad(&pred, gt, &centers, stage)?;
    if !lw.total.is_finite() {
        return Ok(SampleGrad { loss: lw.breakdown, grads: BTreeMap::new() });
    }
    let (alpha, beta, gamma) = (T::lit(stage.alpha), T::lit(stage.beta), T::lit(stage.gamma));
    let depth_grad: Vec<T> = lw.pixel.1.iter().map(|&g| alpha * g).collect();
    let center_grad: Vec<T> = lw.bin.1.iter().zip(&lw.minmax.1).map(|(&b, &m)| beta * b + gamma * m).collect();
    let ld = s.graph.scalar_fn(out.depth, lw.total, depth_grad);
    let lc = s.graph.scalar_fn(out.centers, T::zero(), center_grad);
    let root = s.graph.add(ld, lc);
    Ok(SampleGrad { loss: lw.breakdown, grads: s.param_grads(root) })
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |h, &p| {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = DaNet::new(config.network.clone(), config.seed)?;
        let log = TrainLog { header: config.header(), ..TrainLog::default() };
        Ok(Self { config, net, optim: AdamState::default(), cursor: Cursor::default(), log })
    }

    /// Resumes from the weights, optimizer state and cursor of `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.config.validate()?;
        let net = ckpt.network()?;
        let log = TrainLog { header: ckpt.config.header(), ..TrainLog::default() };
        Ok(Self { config: ckpt.config.clone(), net, optim: ckpt.optimizer.clone(), cursor: ckpt.cursor, log })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &DaNet<T> {
        &self.net
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(self.config.clone(), self.cursor, self.net.params(), &self.optim)
    }

    pub fn is_finished(&self) -> bool {
        self.cursor.stage >= 2
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, dataset: &[SceneSample<T>]) -> Result<()> {
        while self.run_epoch(dataset)?.is_some() {}
        Ok(())
    }

    /// Runs the next epoch, returning its log, or `None` once both stages are done.
    pub fn run_epoch(&mut self, dataset: &[SceneSample<T>]) -> Result<Option<EpochLog>> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        // Skip exhausted stages, applying the stage transition policy.
        loop {
            let stages = self.config.stages();
            let Some(&(_, sched)) = stages.get(self.cursor.stage) else { return Ok(None) };
            if self.cursor.epoch < sched.epochs {
                break;
            }
            self.cursor.stage += 1;
            self.cursor.epoch = 0;
            if self.cursor.stage == 1 && self.config.optimizer.reset_moments_between_stages {
                self.optim.reset();
            }
        }
        let (stage, sched) = self.config.stages()[self.cursor.stage];
        let (stage, loss_cfg) = (stage, sched.loss);
        let sched_epoch = self.config.schedule_epoch(stage, self.cursor.epoch);
        let lr = self.config.optimizer.lr_at(sched_epoch);
        let run_epoch = self.config.local.epochs * (self.cursor.stage) + self.cursor.epoch;

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.config.seed, run_epoch as u64, 1])));
        let mut epoch_total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let mut mean = LossBreakdown { pixel: 0.0, bin: 0.0, minmax: 0.0, total: 0.0 };
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = if self.config.augment {
                    augment(&dataset[idx], mix(&[self.config.seed, run_epoch as u64, idx as u64, 2]))
                } else {
                    dataset[idx].clone()
                };
                let sg = sample_gradient(&self.net, &sample, &loss_cfg)?;
                let bad: Vec<String> = sg
                    .grads
                    .iter()
                    .filter(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
                    .map(|(n, _)| n.clone())
                    .collect();
                if !sg.loss.total.is_finite() || !bad.is_empty() {
                    return Err(self.divergence(stage, sched_epoch, idx, sg.loss, bad));
                }
                mean.pixel += sg.loss.pixel * inv;
                mean.bin += sg.loss.bin * inv;
                mean.minmax += sg.loss.minmax * inv;
                mean.total += sg.loss.total * inv;
                for (name, g) in sg.grads {
                    let g = g.map(|v| v * T::lit(inv));
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            self.optim.step(self.net.params_mut(), &acc, lr, &self.config.optimizer)?;
            self.cursor.step += 1;
            epoch_total += mean.total * batch.len() as f64;
            let entry = StepLog { stage, epoch: sched_epoch, step: self.cursor.step, lr, loss: mean };
            log::debug!("{}", entry.csv_row());
            self.log.steps.push(entry);
        }
        self.cursor.epoch += 1;
        let epoch_log = EpochLog { stage, epoch: sched_epoch, lr, mean_total: epoch_total / dataset.len() as f64 };
        log::info!(
            "stage {} epoch {} lr {:e} mean loss {:.6}",
            stage.name(),
            sched_epoch,
            lr,
            epoch_log.mean_total
        );
        self.log.epochs.push(epoch_log);
        Ok(Some(epoch_log))
    }

    fn divergence(&self, stage: Stage, epoch: usize, sample: usize, loss: LossBreakdown, bad: Vec<String>) -> Error {
        let largest = self
            .net
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy().abs()))))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or_default();
        let dump = DivergenceDump {
            stage,
            epoch,
            step: self.cursor.step + 1,
            sample,
            loss,
            non_finite_gradients: bad,
            largest_parameter: largest,
        };
        Error::Divergence(serde_json::to_string_pretty(&dump).unwrap_or_else(|e| e.to_string()))
    }
}

/// Trains from scratch on `dataset` and returns the final checkpoint.
pub fn train<T: Scalar>(config: TrainConfig, dataset: &[SceneSample<T>]) -> Result<(Checkpoint<T>, TrainLog)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(dataset)?;
    Ok((trainer.checkpoint(), trainer.log.clone()))
}
