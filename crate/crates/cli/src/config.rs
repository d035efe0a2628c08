//! The experiment manifest: one JSON file holding every tunable, overridable
//! by command-line flags (flags win). Unknown keys are rejected so a typo
//! cannot silently fall back to a default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use bdl_core::data::SynthConfig;
use bdl_core::detect::DetectConfig;
use bdl_core::net::NetConfig;
use bdl_core::train::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub synth: SynthConfig,
    /// Matching overlap threshold for evaluation.
    pub eval_iou: f64,
    /// Negative windows harvested per image.
    pub neg_per_image: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            synth: SynthConfig::default(),
            eval_iou: 0.5,
            neg_per_image: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.detect.validate()?;
        self.synth.validate()?;
        if self.net.input_maps < 5 {
            anyhow::bail!(
                "net.input_maps must be at least 5 (LUV + magnitude + one orientation bin)"
            );
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            anyhow::bail!("eval_iou must be in (0, 1]");
        }
        Ok(())
    }

    /// Orientation bin count implied by the network input planes.
    pub fn bins(&self) -> usize {
        self.net.input_maps - 4
    }

    pub fn window(&self) -> (usize, usize) {
        self.net.window
    }
}
