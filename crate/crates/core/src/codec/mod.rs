//! Temporally-causal video VAE: pixel clips (T'+1, H', W', 3) compress to
//! latents (T'/r_t + 1, H'/r_h, W'/r_w, C) and back. Single frames pass
//! through as the T' = 0 image case.

pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Decoder, Discriminator, Encoder, Vae};
pub use train::{codec_train_step, discriminator_step, kl_divergence, thin_decoder_retrain, CodecLosses};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecConfig {
    pub r_t: usize,
    pub r_h: usize,
    pub r_w: usize,
    pub latent_channels: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub kl_weight: f64,
    pub adv_weight: f64,
    pub perc_weight: f64,
    /// Squared-error companion to the L1 term; dominates late convergence.
    #[serde(default = "default_mse_weight")]
    pub mse_weight: f64,
}

fn default_mse_weight() -> f64 {
    10.0
}

impl CodecConfig {
    /// Desk-scale default, trainable in minutes on CPU.
    pub fn desk() -> Self {
        CodecConfig {
            r_t: 2,
            r_h: 4,
            r_w: 4,
            latent_channels: 8,
            enc_widths: vec![24, 48, 48],
            dec_widths: vec![48, 24],
            kl_weight: 1e-6,
            adv_weight: 0.05,
            perc_weight: 0.1,
            mse_weight: 10.0,
        }
    }

    /// Production-scale ratios, kept as a named preset for shape tests.
    pub fn production_shape_preset() -> Self {
        CodecConfig {
            r_t: 4,
            r_h: 16,
            r_w: 16,
            latent_channels: 48,
            enc_widths: vec![8, 8, 8],
            dec_widths: vec![8, 8],
            kl_weight: 1e-6,
            adv_weight: 0.05,
            perc_weight: 0.1,
            mse_weight: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_t < 1 || self.r_h < 1 || self.r_w < 1 {
            return Err(Error::invalid("downsample ratios must be >= 1"));
        }
        for (name, r) in [("r_t", self.r_t), ("r_h", self.r_h), ("r_w", self.r_w)] {
            if !r.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "{name} = {r} must be a power of two"
                )));
            }
        }
        if self.latent_channels < 1 {
            return Err(Error::invalid("latent_channels must be >= 1"));
        }
        if self.enc_widths.is_empty() || self.dec_widths.is_empty() {
            return Err(Error::invalid("channel width lists must be non-empty"));
        }
        Ok(())
    }

    /// Latent shape for a valid video shape (frames, H, W, 3).
    pub fn latent_shape(&self, video_shape: &[usize]) -> Result<Vec<usize>> {
        self.validate_video_shape(video_shape)?;
        let frames = video_shape[0];
        Ok(vec![
            (frames - 1) / self.r_t + 1,
            video_shape[1] / self.r_h,
            video_shape[2] / self.r_w,
            self.latent_channels,
        ])
    }

    /// Video shape invariants: (frames - 1) divisible by r_t, spatial dims by
    /// r_h / r_w. Errors name the offending axis.
    pub fn validate_video_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::invalid(format!(
                "video shape must be (frames, H, W, 3), got {shape:?}"
            )));
        }
        if shape[0] == 0 || (shape[0] - 1) % self.r_t != 0 {
            return Err(Error::invalid(format!(
                "time axis: frames = {} but frames - 1 must be divisible by r_t = {}",
                shape[0], self.r_t
            )));
        }
        if shape[1] % self.r_h != 0 {
            return Err(Error::invalid(format!(
                "height axis: {} not divisible by r_h = {}",
                shape[1], self.r_h
            )));
        }
        if shape[2] % self.r_w != 0 {
            return Err(Error::invalid(format!(
                "width axis: {} not divisible by r_w = {}",
                shape[2], self.r_w
            )));
        }
        Ok(())
    }
}

/// Overall compression ratio: C / (3 * r_t * r_h * r_w).
pub fn compression_ratio(cfg: &CodecConfig) -> f64 {
    cfg.latent_channels as f64 / (3.0 * (cfg.r_t * cfg.r_h * cfg.r_w) as f64)
}

/// Peak signal-to-noise ratio in dB between clips in [0, 1].
pub fn psnr(a: &crate::tensor::Tensor<f32>, b: &crate::tensor::Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse <= 1e-12 {
        return 120.0;
    }
    10.0 * (1.0 / mse).log10()
}
