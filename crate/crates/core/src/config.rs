//! The single-file run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionConfig;
use crate::distill::DistillConfig;
use crate::encoder::EncoderConfig;
use crate::error::{config_err, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::synthdata::{generate_noise_bank, CorpusSpec, FeatureSequence, SyntheticSample, SyntheticWorld};
use crate::trainkit::{FinetuneConfig, PretrainConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "av2vec")]
    Av2vec,
    #[serde(rename = "av2vec-mlm")]
    Av2vecMlm,
}

/// Where the corpus lives and how noise is made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Held-out utterances for evaluation, drawn from the same world.
    pub eval_utterances: usize,
    pub noise_bank_size: usize,
    /// AR(1) coefficient of the noise.
    pub noise_color: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data"), eval_utterances: 50, noise_bank_size: 16, noise_color: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    /// 1-based encoder layer to cluster; 0 picks the middle layer.
    pub layer: usize,
    pub max_iters: usize,
    /// Checkpoint to cluster; empty means `<run_dir>/checkpoints/last.av2c`.
    pub checkpoint: PathBuf,
    /// Target files; empty means `<data.dir>/targets`.
    pub targets_dir: PathBuf,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 16, layer: 0, max_iters: 100, checkpoint: PathBuf::new(), targets_dir: PathBuf::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub synth: CorpusSpec,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub corruption: CorruptionConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Av2vec,
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            synth: CorpusSpec::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            corruption: CorruptionConfig::default(),
            encoder: EncoderConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const LAST_CHECKPOINT: &str = "last.av2c";
pub const PROBE_CHECKPOINT: &str = "probe.av2c";

impl RunConfig {
    /// Parses and validates; unknown keys are rejected by name.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain_config().validate()?;
        self.finetune.validate()?;
        if self.data.noise_bank_size < 1 {
            return Err(config_err("data.noise_bank_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.data.noise_color) {
            return Err(config_err("data.noise_color must lie in [0, 1)"));
        }
        if self.cluster.k < 2 {
            return Err(config_err("cluster.k must be >= 2"));
        }
        if self.cluster.layer > self.encoder.num_layers {
            return Err(config_err(format!(
                "cluster.layer {} exceeds encoder.num_layers {}",
                self.cluster.layer, self.encoder.num_layers
            )));
        }
        if self.mode == Mode::Av2vecMlm && self.cluster.k != self.encoder.num_clusters {
            return Err(config_err(format!(
                "cluster.k = {} must equal encoder.num_clusters = {} for av2vec-mlm",
                self.cluster.k, self.encoder.num_clusters
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            features: self.features.clone(),
            encoder: self.encoder.clone(),
            audio_in_dim: self.synth.audio_dim * self.synth.audio_rate_ratio,
            video_channels: self.synth.video_channels,
            video_rate_hz: self.synth.video_rate_hz,
            mlm_enabled: self.mode == Mode::Av2vecMlm,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model_config(),
            corruption: self.corruption.clone(),
            distill: self.distill.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn cluster_layer(&self) -> usize {
        if self.cluster.layer == 0 {
            self.encoder.num_layers.div_ceil(2)
        } else {
            self.cluster.layer
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join(CHECKPOINT_DIR)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join(REPORT_DIR)
    }

    pub fn cluster_checkpoint(&self) -> PathBuf {
        if self.cluster.checkpoint.as_os_str().is_empty() {
            self.checkpoint_dir().join(LAST_CHECKPOINT)
        } else {
            self.cluster.checkpoint.clone()
        }
    }

    pub fn targets_dir(&self) -> PathBuf {
        if self.cluster.targets_dir.as_os_str().is_empty() {
            self.data.dir.join("targets")
        } else {
            self.cluster.targets_dir.clone()
        }
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data.dir.join("eval")
    }

    /// Training and held-out utterances from one world.
    pub fn generate_corpora(&self) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
        let world = SyntheticWorld::new(self.synth.clone())?;
        let train = world.generate();
        let n = self.synth.num_utterances;
        let eval = (n..n + self.data.eval_utterances).map(|i| world.sample(i)).collect();
        Ok((train, eval))
    }

    /// Deterministic noise clips long enough for the longest utterance.
    pub fn noise_bank(&self) -> Vec<FeatureSequence> {
        generate_noise_bank(
            self.data.noise_bank_size,
            self.synth.frames_max * self.synth.audio_rate_ratio,
            self.synth.audio_dim,
            self.data.noise_color,
            self.synth.audio_rate_hz(),
            self.synth.seed,
        )
    }
}

/// `section.key = default` lines for the given sections (`""` selects the
/// top-level scalars), taken from the default configuration.
pub fn documented_keys(sections: &[&str]) -> Vec<String> {
    let table = toml::Table::try_from(RunConfig::default()).expect("config serialises");
    let mut out = Vec::new();
    for &section in sections {
        if section.is_empty() {
            for (k, v) in &table {
                if !v.is_table() {
                    out.push(format!("{k} = {v}"));
                }
            }
        } else if let Some(toml::Value::Table(t)) = table.get(section) {
            for (k, v) in t {
                out.push(format!("{section}.{k} = {v}"));
            }
        }
    }
    out
}
