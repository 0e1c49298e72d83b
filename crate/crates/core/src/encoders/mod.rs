//! Frozen stand-ins for a dual image/text encoder.
//!
//! Weights are seeded random draws and never change after construction.
//! The only trainable tensor here is the per-domain context of the text
//! template.

mod image;
mod text;
mod transformer;

use serde::{Deserialize, Serialize};

pub use image::{pooled_raw_feature, BoundImageEncoder, ImageEncoder};
pub use text::{BoundTextEncoder, SemanticTemplate, TextEncoder, PREFIX_TOKENS};
pub use transformer::{Block, BoundBlock, BoundLinear, Linear};

use crate::error::{Error, Result};

/// Dimensions and seeds that fully determine both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub tokens: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub context_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Spread of the image positional encodings; keep it below the token
    /// scale or position swamps content.
    pub position_std: f64,
    pub image_seed: u64,
    pub text_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            input_dim: 64,
            embed_dim: 32,
            text_dim: 32,
            context_len: 4,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
            position_std: 0.01,
            image_seed: 1001,
            text_seed: 2002,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tokens", self.tokens),
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("text_dim", self.text_dim),
            ("context_len", self.context_len),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        if !(self.position_std.is_finite() && self.position_std >= 0.0) {
            return Err(Error::Config(format!("encoder.position_std must be finite and non-negative, got {}", self.position_std)));
        }
        if self.input_dim % self.heads != 0 || self.text_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.heads {} must divide input_dim {} and text_dim {}",
                self.heads, self.input_dim, self.text_dim
            )));
        }
        Ok(())
    }
}
