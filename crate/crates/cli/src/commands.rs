use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use danet::checkpoint::Checkpoint;
use danet::data::{self, DatasetManifest, SyntheticConfig};
use danet::eval::{self, EvalOptions};
use danet::train::{load_dataset, scene_seed, DatasetSource, StepLog, TrainConfig, Trainer};
use danet::types::DepthRange;
use danet::Error;

use crate::{DataArgs, DiagnoseArgs, EvalArgs, GenDataArgs, TrainArgs};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

/// A configuration problem detected by the CLI itself.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Divergence(_)) => EXIT_DIVERGENCE,
        Some(e) if e.is_data_error() => EXIT_DATA,
        Some(Error::Checkpoint(_) | Error::VersionMismatch { .. }) => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn apply_data_args(source: &mut DatasetSource, args: &DataArgs) {
    if let Some(path) = &args.manifest {
        *source = DatasetSource::Manifest { path: path.clone() };
        return;
    }
    if args.samples.is_none() && args.data_seed.is_none() {
        return;
    }
    if let DatasetSource::Manifest { .. } = source {
        *source = DatasetSource::default();
    }
    if let DatasetSource::Synthetic { count, seed, .. } = source {
        if let Some(n) = args.samples {
            *count = n;
        }
        if let Some(s) = args.data_seed {
            *seed = s;
        }
    }
}

fn set<V>(dst: &mut V, v: Option<V>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.local.epochs, args.local_epochs);
    set(&mut cfg.global.epochs, args.global_epochs);
    set(&mut cfg.network.num_bins, args.num_bins);
    set(&mut cfg.optimizer.lr, args.lr);
    set(&mut cfg.optimizer.weight_decay, args.weight_decay);
    if let Some(s) = args.image_size {
        cfg.network.input_h = s;
        cfg.network.input_w = s;
    }
    if args.no_pst {
        cfg.network.use_pst = false;
    }
    if args.no_augment {
        cfg.augment = false;
    }
    if args.reset_moments {
        cfg.optimizer.reset_moments_between_stages = true;
    }
    apply_data_args(&mut cfg.dataset, &args.data);
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(path: &Path, header: &[String], steps: &[StepLog]) -> Result<()> {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(StepLog::CSV_HEADER);
    out.push('\n');
    for s in steps {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn train(out_dir: &Path, args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?,
        None => Trainer::<f32>::new(resolve_train_config(&args)?)?,
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let cfg = trainer.config().clone();
    for line in &trainer.log().header {
        log::info!("{line}");
    }
    fs::write(out_dir.join("config.toml"), toml::to_string(&cfg)?)?;
    let dataset = load_dataset::<f32>(&cfg.dataset, &cfg.network)?;
    log::info!("{} training samples, {} parameters", dataset.len(), trainer.network().num_parameters());

    let ckpt_path = out_dir.join("checkpoint.json");
    let log_path = out_dir.join("train_log.csv");
    loop {
        match trainer.run_epoch(&dataset) {
            Ok(Some(_)) => {
                trainer.checkpoint().save(&ckpt_path)?;
                write_log(&log_path, &trainer.log().header, &trainer.log().steps)?;
            }
            Ok(None) => break,
            Err(Error::Divergence(dump)) => {
                let dump_path = out_dir.join("divergence.json");
                fs::write(&dump_path, &dump)?;
                write_log(&log_path, &trainer.log().header, &trainer.log().steps)?;
                return Err(Error::Divergence(format!("non-finite loss, state dumped to {}", dump_path.display())).into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    write_log(&log_path, &trainer.log().header, &trainer.log().steps)?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn dataset_for(ckpt: &Checkpoint<f32>, args: &DataArgs) -> Result<Vec<danet::SceneSample<f32>>> {
    let mut source = ckpt.config.dataset.clone();
    apply_data_args(&mut source, args);
    Ok(load_dataset(&source, &ckpt.config.network)?)
}

pub fn eval(out_dir: &Path, args: EvalArgs) -> Result<()> {
    if args.bins == 0 {
        return Err(ConfigError("--bins must be >= 1".into()).into());
    }
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let net = ckpt.network()?;
    let dataset = dataset_for(&ckpt, &args.data)?;
    let report = eval::evaluate(&net, &dataset, args.bins, EvalOptions { passthrough: args.gt_passthrough })?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("eval.csv"), report.per_sample_csv())?;
    let summary = report.summary();
    fs::write(out_dir.join("eval_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn diagnose(out_dir: &Path, args: DiagnoseArgs) -> Result<()> {
    if args.bins == 0 {
        return Err(ConfigError("--bins must be >= 1".into()).into());
    }
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let net = ckpt.network()?;
    let dataset = dataset_for(&ckpt, &args.data)?;
    let sample = dataset
        .get(args.index)
        .ok_or_else(|| ConfigError(format!("sample index {} out of {}", args.index, dataset.len())))?;
    let dir = out_dir.join("diagnose");
    let d = eval::diagnose(&net, sample, &dir, args.bins, EvalOptions { passthrough: args.gt_passthrough })?;
    print!("{}", d.report.to_kv());
    println!("files: {}", dir.display());
    Ok(())
}

pub fn gen_data(out_dir: &Path, args: GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        height: args.height,
        width: args.width,
        d_min: args.d_min,
        d_max: args.d_max,
        ..SyntheticConfig::default()
    };
    cfg.validate()?;
    if !(args.scale > 0.0) {
        return Err(ConfigError("--scale must be > 0".into()).into());
    }
    let dir = out_dir.join("data");
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let sample = data::generate_scene::<f64>(scene_seed(args.seed, i), &cfg)?;
        entries.push(data::write_sample(&sample, &dir, &format!("{i:05}"), args.scale)?);
    }
    let manifest = DatasetManifest { entries, scale: args.scale, range: DepthRange::new(args.d_min, args.d_max)? };
    let path = dir.join("manifest.txt");
    data::write_manifest(&path, &manifest)?;
    println!("manifest: {}", path.display());
    Ok(())
}
