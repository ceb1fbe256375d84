//! Run configuration: a flat TOML document plus flag overrides.
//!
//! Unknown keys are rejected so hyperparameter typos fail loudly. The data
//! root resolves from the `--data-root` flag, then the `DGMDR_DATA_ROOT`
//! environment variable, then errors out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dgmdr_core::data::{load_manifest, DomainDataset, TaskMode, TrainConfig};
use dgmdr_core::encoder::TinyConvSpec;
use dgmdr_core::harness::{BenchmarkSettings, OracleSource};
use dgmdr_core::swad::SwadConfig;
use dgmdr_core::trainer::{Algorithm, OraclePretrainSpec};
use dgmdr_core::{Error, Result};

fn d_lr() -> f64 {
    5e-5
}
fn d_steps() -> usize {
    5000
}
fn d_batch() -> usize {
    32
}
fn d_lambda() -> f64 {
    1.0
}
fn d_eval() -> usize {
    100
}
fn d_image() -> usize {
    224
}
fn d_half() -> f64 {
    0.5
}
fn d_point3() -> f64 {
    0.3
}
fn d_mean() -> [f64; 3] {
    dgmdr_core::augment::IMAGENET_MEAN
}
fn d_std() -> [f64; 3] {
    dgmdr_core::augment::IMAGENET_STD
}
fn d_arch() -> String {
    "tiny_conv".to_string()
}
fn d_arch_input() -> usize {
    32
}
fn d_arch_channels() -> [usize; 3] {
    [6, 12, 24]
}
fn d_oracle_steps() -> usize {
    300
}
fn d_oracle_lr() -> f64 {
    1e-3
}
fn d_patience() -> usize {
    3
}
fn d_tolerance() -> f64 {
    1.2
}

/// Schema of the flat key-value run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub name: String,
    pub algorithm: String,
    pub task: String,
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,

    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_eval")]
    pub eval_interval: usize,

    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_half")]
    pub hist_eq_prob: f64,
    #[serde(default = "d_half")]
    pub hflip_prob: f64,
    #[serde(default = "d_point3")]
    pub jitter_prob: f64,
    #[serde(default = "d_point3")]
    pub jitter_strength: f64,
    #[serde(default = "d_mean")]
    pub normalize_mean: [f64; 3],
    #[serde(default = "d_std")]
    pub normalize_std: [f64; 3],

    #[serde(default = "d_arch")]
    pub arch: String,
    #[serde(default = "d_arch_input")]
    pub arch_input_size: usize,
    #[serde(default = "d_arch_channels")]
    pub arch_channels: [usize; 3],

    #[serde(default)]
    pub oracle_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub oracle_pretrain_manifest: Option<PathBuf>,
    #[serde(default = "d_oracle_steps")]
    pub oracle_pretrain_steps: usize,
    #[serde(default = "d_oracle_lr")]
    pub oracle_pretrain_lr: f64,
    #[serde(default)]
    pub oracle_seed: u64,

    #[serde(default = "d_patience")]
    pub swad_patience: usize,
    #[serde(default = "d_tolerance")]
    pub swad_tolerance_ratio: f64,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&raw)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag overrides shared by the train/benchmark/report commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub algorithm: Option<String>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub resume: bool,
}

/// A fully resolved run: validated settings plus the domain list.
#[derive(Debug)]
pub struct RunManifest {
    pub settings: BenchmarkSettings,
    pub domain_names: Vec<String>,
}

pub fn resolve_data_root(flag: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Ok(env) = std::env::var("DGMDR_DATA_ROOT") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(Error::config(
        "no data root: pass --data-root or set DGMDR_DATA_ROOT",
    ))
}

/// Merges the config file with flag overrides into benchmark settings.
pub fn resolve(config_path: &Path, ov: &Overrides) -> Result<RunManifest> {
    let mut file = FileConfig::load(config_path)?;
    if let Some(l) = ov.lambda {
        file.lambda = l;
    }
    if let Some(a) = &ov.algorithm {
        file.algorithm = a.clone();
    }
    if let Some(t) = &ov.task {
        file.task = t.clone();
    }
    if let Some(s) = ov.seed {
        file.seeds = vec![s];
    }

    let algorithm: Algorithm = file.algorithm.parse()?;
    let task: TaskMode = file.task.parse()?;
    if file.domains.len() < 2 {
        return Err(Error::config("config must list at least 2 domains"));
    }
    if file.seeds.is_empty() {
        return Err(Error::config("config must list at least one seed"));
    }

    let data_root = resolve_data_root(&ov.data_root)?;
    let out_root = ov.out.clone().unwrap_or_else(|| PathBuf::from("."));

    let mut train = TrainConfig::new(task, file.seeds[0]);
    train.lr = file.lr;
    train.weight_decay = file.weight_decay;
    train.steps = file.steps;
    train.batch_size = file.batch_size;
    train.lambda = file.lambda;
    train.eval_interval = file.eval_interval;
    train.swad_enabled = algorithm.swad_enabled();
    train.augment.target_size = file.image_size;
    train.augment.hist_eq_prob = file.hist_eq_prob;
    train.augment.hflip_prob = file.hflip_prob;
    train.augment.jitter_prob = file.jitter_prob;
    train.augment.jitter_strength = file.jitter_strength;
    train.augment.normalize_mean = file.normalize_mean;
    train.augment.normalize_std = file.normalize_std;
    train.augment.validate()?;

    let oracle = match (&file.oracle_checkpoint, &file.oracle_pretrain_manifest) {
        (Some(path), None) => OracleSource::Checkpoint { path: data_root.join(path) },
        (None, Some(manifest)) => {
            if file.arch != "tiny_conv" {
                return Err(Error::config(format!(
                    "oracle pretraining only supports arch = \"tiny_conv\", got '{}'",
                    file.arch
                )));
            }
            OracleSource::Pretrain {
                pool_manifest: manifest.clone(),
                spec: OraclePretrainSpec {
                    steps: file.oracle_pretrain_steps,
                    lr: file.oracle_pretrain_lr,
                    batch_size: file.batch_size,
                    seed: file.oracle_seed,
                },
            }
        }
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "set either oracle_checkpoint or oracle_pretrain_manifest, not both",
            ))
        }
        (None, None) => {
            return Err(Error::config(
                "set one of oracle_checkpoint or oracle_pretrain_manifest",
            ))
        }
    };

    let arch = TinyConvSpec { input_size: file.arch_input_size, channels: file.arch_channels };
    if matches!(oracle, OracleSource::Pretrain { .. }) {
        arch.validate()?;
        if arch.input_size != file.image_size {
            return Err(Error::config(format!(
                "arch_input_size {} must equal image_size {}",
                arch.input_size, file.image_size
            )));
        }
    }

    let swad = SwadConfig { patience: file.swad_patience, tolerance_ratio: file.swad_tolerance_ratio };
    swad.validate()?;

    let config_snapshot = toml::to_string_pretty(&file)
        .map_err(|e| Error::config(format!("cannot serialize resolved config: {e}")))?;

    let settings = BenchmarkSettings {
        name: file.name.clone(),
        algorithm,
        seeds: file.seeds.clone(),
        train,
        swad,
        arch,
        oracle,
        data_root,
        out_root,
        jobs: ov.jobs.unwrap_or(1).max(1),
        resume: ov.resume,
        config_snapshot,
    };
    Ok(RunManifest { settings, domain_names: file.domains })
}

/// Loads every domain manifest named in the config.
pub fn load_domains(manifest: &RunManifest) -> Result<Vec<DomainDataset>> {
    manifest
        .domain_names
        .iter()
        .map(|name| {
            let path = manifest.settings.data_root.join(format!("{name}.csv"));
            if !path.exists() {
                return Err(Error::data(format!(
                    "domain manifest not found: {}",
                    path.display()
                )));
            }
            load_manifest(&path)
        })
        .collect()
}
