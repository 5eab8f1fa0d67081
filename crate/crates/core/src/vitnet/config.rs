use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and size of one vision transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Square input side, pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Teacher and encoder student carry a class token; the decoder
    /// student consumes patch tokens only.
    pub has_class_token: bool,
    pub seed: u64,
}

impl ViTConfig {
    pub fn teacher() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depth: 12,
            num_heads: 4,
            mlp_ratio: 4,
            has_class_token: true,
            seed: 1,
        }
    }

    pub fn encoder_student() -> Self {
        ViTConfig {
            seed: 2,
            ..Self::teacher()
        }
    }

    pub fn decoder_student() -> Self {
        ViTConfig {
            depth: 8,
            has_class_token: false,
            seed: 3,
            ..Self::teacher()
        }
    }

    /// Patches per side (`H' = W'`).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0
            || self.embed_dim == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("depth, mlp_ratio and in_channels must be positive".into());
        }
        Ok(())
    }
}

/// Noisy bottleneck between the fused teacher features and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub drop_rate: f64,
    pub hidden_ratio: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            drop_rate: 0.2,
            hidden_ratio: 4,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "drop_rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        if self.hidden_ratio == 0 {
            return Err(Error::Config("hidden_ratio must be positive".into()));
        }
        Ok(())
    }
}
