//! Experiment orchestration: configs, training, evaluation, ablations and
//! the tagging-threshold sweep.

mod ablate;
mod eval;
mod train;

pub use ablate::{ablate, ablation_variants, AblationReport, AblationRow, AblationTable, Variant};
pub use eval::{
    caption_region, evaluate, read_predictions, sweep_threshold, write_predictions, ControlMode, EvalOutcome,
    SweepCurve, SweepPoint,
};
pub use train::{make_batch, train, BatchRecord, EpochRecord, StepRecord, TrainLog, TrainOutcome};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptionModel, InferenceOptions, ModelConfig};
use crate::nn::AdamConfig;
use crate::synthworld::{DatasetConfig, DatasetManifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup steps before the cosine decay.
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Bernoulli keep probability of each gold control word.
    pub keep_prob: f64,
    /// Probability that one surviving control word is replaced, in both
    /// control and caption, by a random out-of-vocabulary word.
    pub oov_prob: f64,
    /// Use only the first N training samples.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.0,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            keep_prob: 0.5,
            oov_prob: 0.05,
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub tag_threshold: f64,
    pub beam_size: usize,
    pub max_samples: Option<usize>,
    pub sweep_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            tag_threshold: 0.8,
            beam_size: 3,
            max_samples: None,
            sweep_grid: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl EvalConfig {
    pub fn inference_options(&self, model: &ModelConfig) -> InferenceOptions {
        let mut opts = InferenceOptions {
            tag_threshold: self.tag_threshold,
            ..InferenceOptions::default()
        };
        opts.beam.beam_size = self.beam_size.max(1);
        opts.beam.max_len = model.max_len;
        opts
    }
}

/// Everything a run depends on. Serialized next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub dataset_seed: u64,
    pub model: ModelConfig,
    /// `none` trains without the control path; any other mode trains with
    /// gold-dropout controls and is the default evaluation mode.
    pub control_mode: ControlMode,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "full".into(),
            seed: 0,
            dataset: DatasetConfig::default(),
            dataset_seed: 0,
            model: ModelConfig::default(),
            control_mode: ControlMode::SelfTags,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Whether training feeds control sentences.
    pub fn trains_controls(&self) -> bool {
        self.model.control && self.control_mode != ControlMode::None
    }

    /// Stable key of everything that influences the trained weights.
    pub fn training_key(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "dataset": self.dataset,
            "dataset_seed": self.dataset_seed,
            "model": self.model,
            "controls": self.trains_controls(),
            "train": self.train,
        });
        format!("{:016x}", fnv1a(key.to_string().as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A directory holding one run's config snapshot and outputs.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let dir = Self { path: path.to_path_buf() };
        dir.write("config.json", &config.to_json())?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Trains `config` unless a checkpoint for the same training key already
/// exists under `cache_dir`. Returns the model and its run directory.
pub fn train_cached(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    cache_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(CaptionModel, PathBuf)> {
    let dir = cache_dir.join(format!("{}-{}", config.name, config.training_key()));
    let ckpt = dir.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        if let Ok(model) = CaptionModel::load(&ckpt) {
            if model.config == config.model {
                return Ok((model, dir));
            }
        }
    }
    let run = RunDir::create(&dir, config)?;
    let outcome = train(config, manifest, Some(&run), progress)?;
    // Write the checkpoint last so a partial run is never picked up.
    outcome.model.save(&ckpt)?;
    Ok((outcome.model, dir))
}

/// Builds (or reads back from `dir` when present) the dataset of a config.
pub fn load_or_build_dataset(config: &ExperimentConfig, dir: Option<&Path>) -> Result<DatasetManifest> {
    if let Some(d) = dir {
        if d.join("header.json").exists() || d.join("train.jsonl").exists() {
            let m = DatasetManifest::read(d)?;
            if m.header.config == config.dataset && m.header.seed == config.dataset_seed {
                return Ok(m);
            }
        }
    }
    let m = crate::synthworld::build_dataset(&config.dataset, config.dataset_seed)?;
    if let Some(d) = dir {
        m.write(d)?;
    }
    Ok(m)
}
