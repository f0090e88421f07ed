//! Architecture hyperparameters and the two standard profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder/decoder stack.  `canvas` is the full composed side
/// (twice the cell side); patches tile it in a `canvas/patch` square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Composed canvas side in pixels.
    pub canvas: usize,
    /// Patch side in pixels; must divide `canvas`.
    pub patch: usize,
    /// Embedding width.
    pub embed: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Attention heads; must divide `embed`.
    pub heads: usize,
    /// Input channels (grayscale only).
    pub channels: usize,
}

impl Default for ModelConfig {
    /// The full-size profile: a standard 12-layer, 768-wide encoder over a
    /// 224 canvas with 16-pixel patches.
    fn default() -> Self {
        ModelConfig { canvas: 224, patch: 16, embed: 768, depth: 12, heads: 12, channels: 1 }
    }
}

impl ModelConfig {
    /// A profile small enough to train on one CPU core in minutes:
    /// 64 canvas, 8-pixel patches, 4 blocks of width 128 (~0.8M params).
    pub fn toy() -> Self {
        ModelConfig { canvas: 64, patch: 8, embed: 128, depth: 4, heads: 4, channels: 1 }
    }

    /// Cell side: one quadrant of the canvas.
    pub fn cell(&self) -> usize {
        self.canvas / 2
    }

    /// Patches per canvas side.
    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch: patch area times channels.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Hidden width of the block MLPs (the usual 4x expansion).
    pub fn mlp_dim(&self) -> usize {
        4 * self.embed
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field, message: String| Err(Error::InvalidConfig { field, message });
        if self.canvas == 0 || self.canvas % 2 != 0 {
            return err("model.canvas", format!("must be positive and even, got {}", self.canvas));
        }
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return err(
                "model.patch",
                format!("must divide canvas {} evenly, got {}", self.canvas, self.patch),
            );
        }
        if self.cell() % self.patch != 0 {
            return err(
                "model.patch",
                format!(
                    "must divide the cell side {} so cells align to the patch grid, got {}",
                    self.cell(),
                    self.patch
                ),
            );
        }
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return err(
                "model.heads",
                format!("heads {} must divide embed {}", self.heads, self.embed),
            );
        }
        if self.depth == 0 {
            return err("model.depth", "must be >= 1".into());
        }
        if self.channels != 1 {
            return err(
                "model.channels",
                format!("only single-channel input is supported, got {}", self.channels),
            );
        }
        Ok(())
    }
}
