//! Dual encoders: a small ViT image encoder and a prompt-driven text encoder.

pub mod image;
pub mod nn;
pub mod text;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use image::{ImageEncoder, ImageFeatures};
pub use nn::NamedParams;
pub use text::{PromptSequence, TemplateToken, TextEncoder};

/// Architecture sizes for both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Transformer width of the image encoder; also the pre-projection feature width.
    pub vision_width: usize,
    pub vision_depth: usize,
    pub vision_heads: usize,
    /// Projected (shared image/text) embedding width.
    pub embed_dim: usize,
    /// Token width of the text encoder and of prompt slots.
    pub token_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    /// Number of specific/shared prompt token pairs.
    pub prompt_tokens: usize,
    pub temperature_init: f64,
    /// Optional checkpoint directory holding externally trained encoder weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 4,
            vision_width: 48,
            vision_depth: 2,
            vision_heads: 4,
            embed_dim: 32,
            token_dim: 32,
            text_depth: 2,
            text_heads: 4,
            mlp_ratio: 4,
            prompt_tokens: 16,
            temperature_init: 0.07,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    pub fn pre_dim(&self) -> usize {
        self.vision_width
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Prompt length: start, "a photo of a", 2M slots, "person", ".", end.
    pub fn prompt_len(&self) -> usize {
        2 * self.prompt_tokens + 8
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |key: &str, message: String| {
            Err(crate::Error::Config {
                key: format!("model.{key}"),
                message,
            })
        };
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return bad("patch_size", "must divide image height and width".into());
        }
        if self.vision_heads == 0 || !self.vision_width.is_multiple_of(self.vision_heads) {
            return bad("vision_heads", "must divide vision_width".into());
        }
        if self.text_heads == 0 || !self.token_dim.is_multiple_of(self.text_heads) {
            return bad("text_heads", "must divide token_dim".into());
        }
        if self.prompt_tokens == 0 || self.embed_dim == 0 {
            return bad(
                "prompt_tokens",
                "prompt_tokens and embed_dim must be positive".into(),
            );
        }
        if !(self.temperature_init > 0.0 && self.temperature_init <= 1.0) {
            return bad("temperature_init", "must lie in (0, 1]".into());
        }
        Ok(())
    }
}
