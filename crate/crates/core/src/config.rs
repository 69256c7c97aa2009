//! Run configuration: one TOML file per run, every default materialized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::bytes_digest;
use crate::backbone::{BackboneMode, BackboneSpec};
use crate::data::{Augment, PatchSpec};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::DiscriminatorConfig;
use crate::nn::AdamConfig;
use crate::objective::TrajectorySpec;
use crate::oos::OosGridSpec;
use crate::predictor::{PredictorConfig, PredictorLossWeights};

fn default_gen_steps() -> u64 {
    200
}

fn default_pred_steps() -> u64 {
    300
}

fn default_batch() -> usize {
    4
}

fn default_lr_patch() -> usize {
    16
}

fn default_hr_patch() -> usize {
    64
}

fn default_log_every() -> u64 {
    10
}

fn default_pred_adam() -> AdamConfig {
    AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    }
}

/// Optimizer schedule and patch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps at t = 0 (the distortion-oriented objective) before trajectory
    /// training, mirroring the usual PSNR-oriented initialization.
    #[serde(default)]
    pub gen_pretrain_steps: u64,
    #[serde(default = "default_gen_steps")]
    pub gen_steps: u64,
    #[serde(default = "default_pred_steps")]
    pub pred_steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr_patch")]
    pub lr_patch: usize,
    #[serde(default = "default_hr_patch")]
    pub hr_patch: usize,
    #[serde(default)]
    pub gen_adam: AdamConfig,
    #[serde(default = "default_pred_adam")]
    pub pred_adam: AdamConfig,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gen_pretrain_steps: 0,
            gen_steps: default_gen_steps(),
            pred_steps: default_pred_steps(),
            batch: default_batch(),
            lr_patch: default_lr_patch(),
            hr_patch: default_hr_patch(),
            gen_adam: AdamConfig::default(),
            pred_adam: default_pred_adam(),
            augment: Augment::default(),
            log_every: default_log_every(),
        }
    }
}

fn default_chunk() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OosConfig {
    #[serde(default)]
    pub grid: OosGridSpec,
    /// Candidates evaluated per chunk of the streaming argmin.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

impl Default for OosConfig {
    fn default() -> Self {
        Self {
            grid: OosGridSpec::default(),
            chunk: default_chunk(),
        }
    }
}

/// Dataset directories; relative paths are resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub predictor_loss: PredictorLossWeights,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub oos: OosConfig,
    pub data: DataConfig,
    /// Directory the relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::from_toml(&text, &base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.trajectory = cfg.trajectory.materialized()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.resolve(&self.data.train)
    }

    pub fn test_dir(&self) -> Option<PathBuf> {
        self.data.test.as_deref().map(|p| self.resolve(p))
    }

    /// The backbone spec with its weight path resolved.
    pub fn backbone_spec(&self) -> BackboneSpec {
        let mut spec = self.backbone.clone();
        if let Some(w) = &spec.weights {
            let resolved = self.resolve(w);
            if resolved.exists() {
                spec.weights = Some(resolved);
            }
        }
        spec
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            lr_patch: self.train.lr_patch,
            scale: self.generator.scale,
            augment: self.train.augment,
        }
    }

    /// Every violated constraint, or `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(m) | Error::Domain(m)) => out.push(m),
            Err(e) => out.push(e.to_string()),
        };
        check(self.generator.validate());
        check(self.predictor_loss.validate());
        check(self.trajectory.build().map(|_| ()));
        let t = &self.train;
        if t.hr_patch != self.generator.scale * t.lr_patch {
            check(Err(Error::config(format!(
                "train.hr_patch ({}) must equal scale ({}) x train.lr_patch ({})",
                t.hr_patch, self.generator.scale, t.lr_patch
            ))));
        }
        if self.discriminator.patch_size != t.hr_patch {
            check(Err(Error::config(format!(
                "discriminator.patch_size ({}) must equal train.hr_patch ({})",
                self.discriminator.patch_size, t.hr_patch
            ))));
        }
        if t.batch == 0 || t.lr_patch == 0 || self.oos.chunk == 0 {
            check(Err(Error::config(
                "batch, lr_patch and oos.chunk must be positive",
            )));
        }
        for (adam, name) in [(t.gen_adam, "gen_adam"), (t.pred_adam, "pred_adam")] {
            if !(adam.lr > 0.0 && adam.lr.is_finite()) {
                check(Err(Error::config(format!(
                    "train.{name}.lr must be positive"
                ))));
            }
        }
        let mut dirs = vec![("data.train", self.train_dir())];
        dirs.extend(self.test_dir().map(|d| ("data.test", d)));
        for (key, dir) in dirs {
            if !dir.is_dir() {
                check(Err(Error::config(format!(
                    "{key}: no directory {}",
                    dir.display()
                ))));
            }
        }
        if self.backbone.mode == BackboneMode::Pretrained {
            match self.backbone_spec().resolved_weights() {
                Ok(p) if p.is_file() => {}
                Ok(p) => check(Err(Error::config(format!(
                    "backbone.weights: no file {}",
                    p.display()
                )))),
                Err(e) => check(Err(e)),
            }
        }
        out
    }

    /// Canonical JSON of the materialized config (keys sorted).
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// Digest of the canonical form: independent of key order and of which
    /// defaults were written out.
    pub fn digest(&self) -> Result<String> {
        Ok(bytes_digest(self.canonical_json()?.as_bytes()))
    }
}
