//! Run configuration: one structured text file driving training,
//! evaluation, and data generation.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{Normalization, SceneSpec, TouchConfig};
use crate::train::{LossWeights, ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic-data settings used when no dataset directory is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub base_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub n_distractors: usize,
    pub touch: TouchConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_seed: 0,
            n_train: 512,
            n_val: 64,
            n_test: 64,
            image_size: 128,
            n_distractors: 3,
            touch: TouchConfig::Mixed,
        }
    }
}

impl SynthConfig {
    pub fn scene_template(&self) -> SceneSpec {
        SceneSpec {
            rng_seed: self.base_seed,
            image_size: self.image_size,
            n_distractors: self.n_distractors,
            touch_config: self.touch,
            ..SceneSpec::default()
        }
    }

    /// Generates one split in memory; seeds match `generate_dataset`.
    pub fn generate(&self, split: &str) -> Result<Vec<crate::synth::SamplePair>> {
        let (n, offset) = match split {
            "train" => (self.n_train, 0),
            "val" => (self.n_val, 1_000_000),
            "test" => (self.n_test, 2_000_000),
            other => return Err(Error::Config(format!("unknown split {other}"))),
        };
        let template = self.scene_template();
        (0..n)
            .map(|i| {
                crate::synth::generate_scene(&SceneSpec {
                    rng_seed: self.base_seed + offset + i as u64,
                    ..template.clone()
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub crop: usize,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            crop: 128,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    pub deterministic: bool,
    pub val_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            deterministic: false,
            val_every: 500,
        }
    }
}

/// Everything a run needs, serializable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub run: RunOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::toy()
    }
}

impl RunConfig {
    /// Desk-scale defaults: trains in CPU minutes.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            schedule: ScheduleConfig::toy(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            run: RunOptions::default(),
        }
    }

    /// Full-scale reference settings (448 crop, long schedule). Provided
    /// for completeness; not sized for CPU runs.
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            schedule: ScheduleConfig::full(),
            loss: LossWeights::default(),
            data: DataConfig {
                synth: SynthConfig {
                    image_size: 448,
                    ..SynthConfig::default()
                },
                crop: 448,
                normalization: Normalization::default(),
            },
            run: RunOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.data.crop != self.model.encoder.image_size {
            return Err(Error::Config(format!(
                "data.crop ({}) must equal the encoder input size ({})",
                self.data.crop, self.model.encoder.image_size
            )));
        }
        if self.data.synth.image_size < self.data.crop {
            return Err(Error::Config(format!(
                "synthetic image size ({}) smaller than crop ({})",
                self.data.synth.image_size, self.data.crop
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            deterministic: self.run.deterministic,
            val_every: self.run.val_every,
            crop: self.data.crop,
            normalization: self.data.normalization.clone(),
            random_crop: true,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form; identifies a configuration
    /// in reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable config");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_catches_crop_mismatch() {
        let mut cfg = RunConfig::toy();
        cfg.data.crop = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = RunConfig::toy();
        let mut b = RunConfig::toy();
        b.run.seed = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::toy().hash());
    }

    #[test]
    fn full_reference_values() {
        let cfg = RunConfig::full();
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule.warmup_iters, 10_000);
        assert_eq!(cfg.schedule.max_iters, 180_000);
        assert_eq!(cfg.schedule.batch_size, 12);
        assert_eq!(cfg.model.encoder.image_size, 448);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.loss.gamma, 1.0);
        assert_eq!(cfg.loss.lambda, 0.5);
    }
}
