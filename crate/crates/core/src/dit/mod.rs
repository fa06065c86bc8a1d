//! Decoupled spatial/temporal multimodal diffusion transformer.
//!
//! Spatial blocks run joint text-visual attention per frame with separate
//! weights per modality; temporal blocks run visual-only attention within
//! spatial windows across all frames; rotary positions span three axes with
//! scalar indices for text.

pub mod blocks;
pub mod model;
pub mod positions;
pub mod rope;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blocks::{spatial_block, temporal_block, AttnProbe, BlockWeights, StreamWeights};
pub use model::{dit_forward, DiTModel};
pub use positions::{build_positions, Modality, Segment, SegmentData, ShotLayout, TokenSequence};
pub use rope::{mm_rope_apply, rope_tables};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiTConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_spatial_layers: usize,
    pub n_temporal_layers: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub rope_base: f64,
    /// Conditioned input channels per latent cell (2C+1 for the base model,
    /// 2C for the refiner).
    pub in_channels: usize,
    /// Velocity output channels (C).
    pub out_channels: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub max_text_tokens: usize,
}

impl DiTConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 6 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {} must be divisible by 6 (three rotary axes of even pairs)",
                self.head_dim()
            )));
        }
        if self.window_h == 0 || self.window_w == 0 {
            return Err(Error::invalid("window dims must be >= 1"));
        }
        if self.n_spatial_layers != self.n_temporal_layers {
            return Err(Error::invalid(
                "spatial and temporal layers alternate 1:1 and must match in count",
            ));
        }
        Ok(())
    }
}
