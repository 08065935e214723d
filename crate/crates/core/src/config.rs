//! Run configuration: one JSON document covering model dimensions, the
//! synthesis recipe, loss/sampler parameters and post-processing knobs.
//! CLI flags override individual fields; the resolved document is echoed
//! into every output directory as `resolved.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, SamplerConfig};
use crate::postprocess::PostConfig;

/// Dimensions and structural knobs of both branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden width d of both branches.
    pub hidden: usize,
    pub cls_dim: usize,
    pub patch_dim: usize,
    /// Frames attended on each side in windowed self-attention.
    pub attn_radius: usize,
    pub heads: usize,
    /// Neighbors kept per row in the similarity graph.
    pub sim_k: usize,
    /// Band radius of the distance graph.
    pub dist_radius: usize,
    /// State size S of the selective-scan blocks.
    pub ssm_state: usize,
    pub window: usize,
    pub stride: usize,
    pub gps_hidden: usize,
    pub cond_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 512,
            cls_dim: 1024,
            patch_dim: 1024,
            attn_radius: 16,
            heads: 8,
            sim_k: 8,
            dist_radius: 5,
            ssm_state: 16,
            window: 512,
            stride: 256,
            gps_hidden: 64,
            cond_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and oracles.
    pub fn toy(hidden: usize) -> Self {
        ModelConfig {
            hidden,
            cls_dim: 2 * hidden,
            patch_dim: 2 * hidden,
            attn_radius: 16,
            heads: 2,
            sim_k: 3,
            dist_radius: 2,
            ssm_state: 4,
            window: 64,
            stride: 32,
            gps_hidden: 4,
            cond_hidden: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden,
            self.cls_dim,
            self.patch_dim,
            self.heads,
            self.sim_k,
            self.ssm_state,
            self.window,
            self.stride,
            self.gps_hidden,
            self.cond_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("model dims must be >= 1".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.stride > self.window {
            return Err(Error::InvalidConfig(format!(
                "stride {} > window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub post: PostConfig,
    pub eval_thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            post: PostConfig::default(),
            eval_thresholds: default_thresholds(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.post.validate()?;
        if self.eval_thresholds.is_empty()
            || self
                .eval_thresholds
                .iter()
                .any(|&t| !(0.0..=1.0).contains(&t))
        {
            return Err(Error::InvalidConfig(
                "eval thresholds must be a non-empty list within [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Echo the fully resolved configuration next to a command's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("resolved.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

pub fn default_thresholds() -> Vec<f64> {
    vec![0.5, 0.95]
}
