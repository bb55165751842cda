use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a Vision Transformer classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// A ViT-B/16-shaped configuration at 224×224.
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            num_classes,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Checks the invariants, naming the offending field under `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| {
            if prefix.is_empty() {
                f.to_string()
            } else {
                format!("{prefix}.{f}")
            }
        };
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(field(name), "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                field("patch_size"),
                format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                field("heads"),
                format!(
                    "width {} is not divisible by heads {}",
                    self.width, self.heads
                ),
            ));
        }
        Ok(())
    }
}

/// Where the adapter sits in each transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    /// Residual bottleneck applied to the MLP output.
    Sequential,
    /// Scaled bottleneck branch beside the MLP.
    Parallel,
    /// One bottleneck per block, branched beside both attention and MLP.
    ParallelShared,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 3] = [
        AdapterVariant::Sequential,
        AdapterVariant::Parallel,
        AdapterVariant::ParallelShared,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            AdapterVariant::Sequential => "S",
            AdapterVariant::Parallel => "P",
            AdapterVariant::ParallelShared => "PS",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            AdapterVariant::Sequential => 1,
            AdapterVariant::Parallel => 2,
            AdapterVariant::ParallelShared => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(AdapterVariant::Sequential),
            2 => Some(AdapterVariant::Parallel),
            3 => Some(AdapterVariant::ParallelShared),
            _ => None,
        }
    }
}

fn default_hidden_dim() -> usize {
    4
}

fn default_scaling() -> f32 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub variant: AdapterVariant,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Branch multiplier; only the parallel variants read it.
    #[serde(default = "default_scaling")]
    pub scaling: f32,
}

impl AdapterSpec {
    pub fn new(variant: AdapterVariant) -> Self {
        Self {
            variant,
            hidden_dim: default_hidden_dim(),
            scaling: default_scaling(),
        }
    }

    pub fn validate(&self, width: usize, prefix: &str) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim >= width {
            return Err(Error::config(
                format!("{prefix}.hidden_dim"),
                format!(
                    "must be in [1, {width}) for width {width}, got {}",
                    self.hidden_dim
                ),
            ));
        }
        if !self.scaling.is_finite() {
            return Err(Error::config(format!("{prefix}.scaling"), "must be finite"));
        }
        Ok(())
    }

    /// Trainable elements one block's adapter adds: both projections and biases.
    pub fn params_per_block(&self, width: usize) -> usize {
        2 * width * self.hidden_dim + self.hidden_dim + width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_fields() {
        let mut c = ViTConfig {
            image_size: 30,
            patch_size: 4,
            channels: 1,
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        };
        let err = c.validate("student").unwrap_err().to_string();
        assert!(err.starts_with("student.patch_size"), "{err}");
        c.image_size = 32;
        c.heads = 3;
        assert!(c.validate("").unwrap_err().to_string().starts_with("heads"));
        c.heads = 2;
        c.validate("").unwrap();
    }

    #[test]
    fn adapter_hidden_dim_bounds() {
        let mut s = AdapterSpec::new(AdapterVariant::Parallel);
        s.validate(8, "a").unwrap();
        s.hidden_dim = 8;
        assert!(s.validate(8, "a").is_err());
        s.hidden_dim = 0;
        assert!(s.validate(8, "a").is_err());
    }

    #[test]
    fn vit_b16_token_count() {
        assert_eq!(ViTConfig::vit_base(100).num_tokens(), 197);
    }
}
