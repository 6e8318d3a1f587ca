//! Run configuration: strict JSON (unknown keys rejected), fully defaulted,
//! hashed into every artifact for provenance.

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Adam learning rate for stage 1; weight decay is fixed at zero.
    pub lr: f64,
    /// Adam learning rate for the adapter stage (the adapter is tiny and
    /// zero-initialized, so it tolerates a hotter rate than the base)
    pub adapt_lr: f64,
    /// prompt draws averaged per adapter optimizer step (variance reduction)
    pub adapt_batch: usize,
    pub weight_decay: f64,
    pub base_epochs: usize,
    pub adapt_epochs: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub occlusion_prob: f64,
    /// box corner noise, sigma = noise_scale * side / 2
    pub noise_scale: f64,
    /// training-time noisy-box IoU window (at least 0.5 overlap with GT)
    pub train_iou_lo: f64,
    pub train_iou_hi: f64,
    /// point counts in the robust training mix
    pub point_counts: Vec<usize>,
    /// offset clamp in normalized coordinates
    pub s_p: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub coarse_band_radius: usize,
    pub coarse_flip_prob: f64,
    /// prompts drawn per image and condition during evaluation
    pub eval_prompts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            lr: 0.001,
            adapt_lr: 0.0015,
            adapt_batch: 2,
            weight_decay: 0.0,
            base_epochs: 30,
            adapt_epochs: 10,
            train_scenes: 200,
            test_scenes: 50,
            occlusion_prob: 0.3,
            noise_scale: 0.4,
            train_iou_lo: 0.5,
            train_iou_hi: 1.0,
            point_counts: vec![1, 3, 10],
            s_p: crate::dsp::DEFAULT_S_P,
            ce_weight: 1.0,
            dice_weight: 1.0,
            coarse_band_radius: 2,
            coarse_flip_prob: 0.5,
            eval_prompts: 20,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Format { what: "run config", detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::Config("weight_decay must be 0".into()));
        }
        if self.lr <= 0.0 || self.adapt_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.s_p <= 0.0 {
            return Err(Error::Config("s_p must be positive".into()));
        }
        if self.point_counts.is_empty() {
            return Err(Error::Config("point_counts must not be empty".into()));
        }
        if self.eval_prompts == 0 {
            return Err(Error::Config("eval_prompts must be >= 1".into()));
        }
        if self.adapt_batch == 0 {
            return Err(Error::Config("adapt_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r = RunConfig::from_json(r#"{"seed": 3, "bogus": 1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn nonzero_weight_decay_rejected() {
        let r = RunConfig::from_json(r#"{"weight_decay": 0.1}"#);
        assert!(r.is_err());
    }
}
