//! Prompt-robust promptable segmentation at desk scale: a frozen toy mask
//! decoder whose token-to-image cross-attention is calibrated by a
//! deformable sampling plugin and a dynamic routing plugin, trained against
//! a degraded-prompt mix and scored with a segmentation-stability metric.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod drp;
pub mod dsp;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod pgm;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
