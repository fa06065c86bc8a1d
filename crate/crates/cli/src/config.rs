//! Run configuration: one JSON file describing the corpus, every model and
//! every training phase. Subcommands read the sections they need.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vidflow_core::codec::CodecConfig;
use vidflow_core::conditioning::TaskKind;
use vidflow_core::diffusion::{StagePlan, StageSpec};
use vidflow_core::dit::DiTConfig;
use vidflow_core::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Vae,
    Pretrain,
    Ct,
    Sft,
    Rlhf,
    Distill,
    Refine,
    Sample,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    pub train_clips: usize,
    pub size: usize,
    pub frames_per_shot: usize,
    /// Pixel frames per shot in the final (higher frame-rate) stage.
    pub frames_hifps: usize,
    pub multishot_fraction: f64,
    /// Spatial factor between the base and refiner resolutions.
    pub hr_factor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecSection {
    #[serde(flatten)]
    pub cfg: CodecConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Step at which the adversarial term switches on.
    pub disc_start: u64,
    /// Length of the adversarial window in steps.
    pub disc_steps: u64,
    pub disc_width: usize,
    pub disc_lr: f64,
    /// Fraction of training batches drawn at the high resolution so the
    /// decoder serves the refiner too.
    pub hr_fraction: f64,
    pub thin_widths: Vec<usize>,
    pub thin_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub nfe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSection {
    pub segments: usize,
    pub grid_n: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub teacher_substeps: usize,
    pub ema_decay: f64,
    pub teacher_nfe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlhfSection {
    pub feedback_steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub prefix_steps: usize,
    pub rounds: usize,
    pub rm_steps: usize,
    pub round_policy_steps: usize,
    pub eval_prompts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSection {
    pub nfe: usize,
    pub frames: usize,
    /// Checkpoint file name under out_dir to sample from.
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeSection {
    pub inputs: Vec<PathBuf>,
    pub weights: Vec<f64>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurateSection {
    pub shot_threshold: f64,
    pub max_shot_frames: usize,
    pub min_quality: f64,
    pub static_floor: f64,
    pub dedup_similarity: f64,
    pub rebalance_attribute: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub phase: Phase,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub codec: CodecSection,
    pub dit: DiTConfig,
    pub plan: StagePlan,
    pub refiner: RefinerSection,
    pub distill: DistillSection,
    pub rlhf: RlhfSection,
    pub sample: SampleSection,
    pub curate: CurateSection,
    pub merge: Option<MergeSection>,
}

impl RunConfig {
    /// Desk-scale defaults: the whole pipeline trains on a laptop-class CPU.
    pub fn desk(out_dir: &Path, seed: u64) -> Self {
        let mix_pretrain = vec![
            (TaskKind::I2v, 0.20),
            (TaskKind::T2v, 0.75),
            (TaskKind::T2i, 0.05),
        ];
        let mix_ct = vec![
            (TaskKind::I2v, 0.40),
            (TaskKind::T2v, 0.55),
            (TaskKind::T2i, 0.05),
        ];
        RunConfig {
            phase: Phase::Pretrain,
            seed,
            out_dir: out_dir.to_path_buf(),
            corpus: CorpusSection {
                train_clips: 384,
                size: 16,
                frames_per_shot: 5,
                frames_hifps: 9,
                multishot_fraction: 0.125,
                hr_factor: 2,
            },
            codec: CodecSection {
                cfg: CodecConfig::desk(),
                steps: 4500,
                batch: 8,
                lr: 1e-3,
                disc_start: 2400,
                disc_steps: 400,
                disc_width: 12,
                disc_lr: 5e-4,
                hr_fraction: 0.15,
                thin_widths: vec![48, 12],
                thin_steps: 500,
            },
            dit: DiTConfig {
                d_model: 96,
                n_heads: 4,
                n_spatial_layers: 3,
                n_temporal_layers: 3,
                window_h: 2,
                window_w: 2,
                rope_base: 100.0,
                in_channels: 17,
                out_channels: 8,
                vocab_size: vidflow_core::datagen::vocab().len(),
                mlp_ratio: 4,
                max_text_tokens: 16,
            },
            plan: StagePlan {
                stages: vec![
                    StageSpec {
                        name: "image".into(),
                        resolution: 16,
                        frames: 1,
                        fps_analog: 1,
                        steps: 800,
                        batch_size: 8,
                        lr: 6e-4,
                        mix: vec![(TaskKind::T2i, 1.0)],
                        short_caption_prob: 0.0,
                    },
                    StageSpec {
                        name: "video".into(),
                        resolution: 16,
                        frames: 5,
                        fps_analog: 1,
                        steps: 3600,
                        batch_size: 8,
                        lr: 6e-4,
                        mix: mix_pretrain.clone(),
                        short_caption_prob: 0.0,
                    },
                    StageSpec {
                        name: "hifps".into(),
                        resolution: 16,
                        frames: 9,
                        fps_analog: 2,
                        steps: 2400,
                        batch_size: 8,
                        lr: 4e-4,
                        mix: mix_pretrain,
                        short_caption_prob: 0.0,
                    },
                    StageSpec {
                        name: "ct".into(),
                        resolution: 16,
                        frames: 9,
                        fps_analog: 2,
                        steps: 800,
                        batch_size: 8,
                        lr: 2e-4,
                        mix: mix_ct,
                        short_caption_prob: 0.5,
                    },
                ],
            },
            refiner: RefinerSection {
                steps: 700,
                batch: 4,
                lr: 4e-4,
                nfe: 8,
            },
            distill: DistillSection {
                segments: 4,
                grid_n: 32,
                steps: 400,
                batch: 4,
                lr: 1e-4,
                teacher_substeps: 4,
                ema_decay: 0.99,
                teacher_nfe: 32,
            },
            rlhf: RlhfSection {
                feedback_steps: 300,
                batch: 4,
                lr: 5e-5,
                t_lo: 0.3,
                t_hi: 0.9,
                prefix_steps: 2,
                rounds: 2,
                rm_steps: 150,
                round_policy_steps: 40,
                eval_prompts: 16,
            },
            sample: SampleSection {
                nfe: 32,
                frames: 5,
                checkpoint: "dit.ckpt".into(),
            },
            curate: CurateSection {
                shot_threshold: 4.0,
                max_shot_frames: 12,
                min_quality: 0.5,
                static_floor: 5e-4,
                dedup_similarity: 0.995,
                rebalance_attribute: "style".into(),
            },
            merge: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.cfg.validate()?;
        self.dit.validate()?;
        self.plan.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.dit.in_channels != 2 * self.codec.cfg.latent_channels + 1 {
            return Err(Error::Config(format!(
                "dit.in_channels = {} must be 2C+1 = {} for C = {}",
                self.dit.in_channels,
                2 * self.codec.cfg.latent_channels + 1,
                self.codec.cfg.latent_channels
            )));
        }
        if self.dit.out_channels != self.codec.cfg.latent_channels {
            return Err(Error::Config(
                "dit.out_channels must equal the codec's latent channels".into(),
            ));
        }
        if (self.corpus.frames_per_shot - 1) % self.codec.cfg.r_t != 0
            || (self.corpus.frames_hifps - 1) % self.codec.cfg.r_t != 0
        {
            return Err(Error::Config(
                "frames_per_shot - 1 must be divisible by the temporal ratio".into(),
            ));
        }
        if self.distill.grid_n % self.distill.segments != 0 {
            return Err(Error::Config(
                "distill.grid_n must be a multiple of distill.segments".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_roundtrips_and_validates() {
        let cfg = RunConfig::desk(Path::new("/tmp/x"), 0);
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn channel_mismatch_detected() {
        let mut cfg = RunConfig::desk(Path::new("/tmp/x"), 0);
        cfg.dit.in_channels = 10;
        assert!(cfg.validate().is_err());
    }
}
