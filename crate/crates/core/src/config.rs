//! Experiment configuration files.
//!
//! A TOML file may name a built-in `preset`; its own keys then override the
//! preset field by field, tables merging recursively.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Encoding, MovingMnistConfig};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::model::ModelConfig;
use crate::rollout::{RolloutConfig, TrainConfig};

pub const PRESETS: [&str; 2] = ["smmnist-desk", "smmnist-paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: MovingMnistConfig,
    /// Clips generated in total, before splitting.
    pub videos: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// MNIST image file in IDX format; procedural digits are used when absent.
    pub mnist_idx: Option<PathBuf>,
    /// Number of procedural source glyphs.
    pub synthetic_glyphs: usize,
    pub encoding: Encoding,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: MovingMnistConfig::desk(),
            videos: 3000,
            split: [0.9, 0.05, 0.05],
            mnist_idx: None,
            synthetic_glyphs: 1000,
            encoding: Encoding::RawF32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub metrics: Vec<Metric>,
    /// Samples generated per batch.
    pub chunk: usize,
    /// Test clips scored; 0 means all.
    pub test_videos: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            metrics: vec![Metric::Psnr, Metric::Ssim],
            chunk: 20,
            test_videos: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub rollout: RolloutConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 32×32 single-digit clips sized for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            name: "smmnist-desk".into(),
            seed: 0,
            model: ModelConfig::default(),
            rollout: RolloutConfig {
                t_cond: 5,
                t_pred: 5,
                ..RolloutConfig::default()
            },
            train: TrainConfig {
                batch_size: 8,
                epochs: 2,
                updates_per_epoch: 500,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// 64×64 two-digit clips at the published network size.
    pub fn paper() -> Self {
        Self {
            name: "smmnist-paper".into(),
            seed: 0,
            model: ModelConfig::paper(),
            rollout: RolloutConfig::default(),
            train: TrainConfig {
                batch_size: 32,
                epochs: 300,
                updates_per_epoch: 1000,
                ..TrainConfig::default()
            },
            data: DataConfig {
                generator: MovingMnistConfig::paper(),
                videos: 20_000,
                ..DataConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smmnist-desk" => Ok(Self::desk()),
            "smmnist-paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => {
                return Err(Error::Config(format!("`preset` must be a string, got {other}")))
            }
            None => Self::default(),
        };
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(table));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        Self::load(Path::new(spec))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rollout.validate(self.model.variant)?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.model.image_size != self.data.generator.canvas || self.model.channels != 1 {
            return Err(Error::Config(format!(
                "model expects {}×{}×{} frames, the generator makes 1×{}×{}",
                self.model.channels,
                self.model.image_size,
                self.model.image_size,
                self.data.generator.canvas,
                self.data.generator.canvas
            )));
        }
        if self.data.generator.frames < self.rollout.frames() {
            return Err(Error::Config(format!(
                "clips of {} frames are shorter than the {}-frame rollout",
                self.data.generator.frames,
                self.rollout.frames()
            )));
        }
        if self.eval.n_samples == 0 || self.eval.metrics.is_empty() {
            return Err(Error::Config("evaluation needs n_samples ≥ 1 and a metric".into()));
        }
        if self.data.mnist_idx.is_none() && self.data.synthetic_glyphs == 0 {
            return Err(Error::Config("synthetic_glyphs must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn presets_match_their_contracts() {
        let desk = ExperimentConfig::preset("smmnist-desk").unwrap();
        let g = &desk.data.generator;
        assert_eq!((g.canvas, g.digits, g.frames), (32, 1, 15));
        let paper = ExperimentConfig::preset("smmnist-paper").unwrap();
        let g = &paper.data.generator;
        assert_eq!((g.canvas, g.digits), (64, 2));
        assert_eq!((paper.rollout.t_cond, paper.rollout.t_pred), (5, 10));
        assert_eq!(paper.model.rnn_width, 256);
        assert_eq!((paper.model.latent_pixel, paper.model.latent_flow), (20, 20));
        assert_eq!(paper.train.batch_size, 32);
        assert_eq!(paper.train.optimizer.lr, 3e-4);
        assert_eq!(paper.model.beta, 1e-4);
        for p in [desk, paper] {
            p.validate().unwrap();
        }
    }

    #[test]
    fn files_override_presets_field_by_field() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            preset = "smmnist-paper"
            seed = 9
            [model]
            variant = "baseline"
            [train.optimizer]
            lr = 1e-3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.variant, Variant::Baseline);
        assert_eq!(cfg.model.rnn_width, 256);
        assert_eq!(cfg.train.optimizer.lr, 1e-3);
        assert_eq!(cfg.train.optimizer.beta2, 0.999);
        assert_eq!(cfg.data.generator.canvas, 64);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "preset = \"nope\"",
            "[model]\nunknown_key = 1",
            "[model]\nimage_size = 30",
            "[rollout]\nt_pred = 20",
            "not toml = = =",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn serialized_config_reloads() {
        let cfg = ExperimentConfig::paper();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
