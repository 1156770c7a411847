//! Run configuration: one JSON document with a section per subsystem.
//! Every section is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::encoder::{EncoderConfig, FinetuneMode, ModelSpec};
use crate::error::{AsdError, Result};
use crate::fclora::LoraConfig;
use crate::features::{MelConfig, SpecAugPolicy};
use crate::groupadapter::AdapterConfig;
use crate::losses::LossConfig;
use crate::metrics::ReportMode;
use crate::synthdata::CorpusConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub mel: MelConfig,
    pub chunk_seconds: f64,
    pub specaug: SpecAugPolicy,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            chunk_seconds: 2.0,
            specaug: SpecAugPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: i64,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub log_every: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Machine types the encoder trains on; `None` means every type not
    /// marked held-out in the corpus.
    pub machines: Option<Vec<String>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 3000,
            warmup_steps: 960,
            lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            machines: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory relative to the work directory.
    pub dir: String,
    pub seed: u64,
    /// Machine types whose train attributes are hidden from the loss.
    pub mask_attributes: Vec<String>,
    pub corpus: CorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            seed: 0,
            mask_attributes: Vec::new(),
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub mode: ReportMode,
    pub p: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mode: ReportMode::Hmean,
            p: crate::metrics::DEFAULT_P,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub fclora: LoraConfig,
    pub adapter: AdapterConfig,
    pub losses: LossConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AsdError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| AsdError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| AsdError::io(path, e))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            lora: self.fclora.clone(),
            adapter: self.adapter.clone(),
        }
    }

    pub fn mode(&self) -> FinetuneMode {
        if self.fclora.frozen {
            FinetuneMode::Lora
        } else {
            FinetuneMode::Full
        }
    }

    /// Patches per chunk under the feature and encoder settings.
    pub fn patches_per_chunk(&self) -> usize {
        let samples = (self.features.chunk_seconds * self.features.mel.sample_rate as f64).round() as usize;
        let frames = self.features.mel.num_frames(samples);
        (frames / self.encoder.patch_t) * (self.features.mel.n_mels / self.encoder.patch_f)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.losses.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(AsdError::Config("training.batch_size must be positive".into()));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.weight_decay >= 0.0) {
            return Err(AsdError::Config("training.lr and weight_decay must be finite and non-negative".into()));
        }
        if !(self.features.chunk_seconds > 0.0) {
            return Err(AsdError::Config("features.chunk_seconds must be positive".into()));
        }
        if self.data.corpus.sample_rate != self.features.mel.sample_rate {
            return Err(AsdError::Config(format!(
                "corpus sample rate {} differs from feature sample rate {}",
                self.data.corpus.sample_rate, self.features.mel.sample_rate
            )));
        }
        let samples = (self.features.chunk_seconds * self.features.mel.sample_rate as f64).round() as usize;
        let frames = self.features.mel.num_frames(samples);
        if frames < self.encoder.patch_t || self.features.mel.n_mels < self.encoder.patch_f {
            return Err(AsdError::Config(format!(
                "patch {}x{} does not fit the {frames}x{} feature grid",
                self.encoder.patch_t, self.encoder.patch_f, self.features.mel.n_mels
            )));
        }
        if self.encoder.positional && self.patches_per_chunk() > self.encoder.max_patches {
            return Err(AsdError::Config(format!(
                "{} patches per chunk exceed encoder.max_patches {}",
                self.patches_per_chunk(),
                self.encoder.max_patches
            )));
        }
        let p = self.features.specaug;
        if p.enabled {
            p.validate(frames, self.features.mel.n_mels)?;
        }
        if !(self.metrics.p > 0.0 && self.metrics.p <= 1.0) {
            return Err(AsdError::Config("metrics.p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
