//! Unified task conditioning: every generation task feeds the transformer a
//! channel concatenation [noisy latent | reference latent | binary mask] per
//! cell, where the mask flags latent frames whose reference channels carry
//! clean instruction content (zero-padded elsewhere).

use serde::{Deserialize, Serialize};

use crate::codec::Vae;
use crate::datagen::caption::tokenize;
use crate::datagen::manifest::ClipRecord;
use crate::dit::{build_positions, ShotLayout, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    T2i,
    T2v,
    I2v,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::T2i => "t2i",
            TaskKind::T2v => "t2v",
            TaskKind::I2v => "i2v",
        }
    }
}

/// Task plus the set of latent frames carrying clean reference content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub conditioned_frames: Vec<usize>,
}

impl TaskSpec {
    pub fn t2v() -> Self {
        TaskSpec {
            kind: TaskKind::T2v,
            conditioned_frames: vec![],
        }
    }

    pub fn t2i() -> Self {
        TaskSpec {
            kind: TaskKind::T2i,
            conditioned_frames: vec![],
        }
    }

    /// First-frame conditioning.
    pub fn i2v() -> Self {
        TaskSpec {
            kind: TaskKind::I2v,
            conditioned_frames: vec![0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::I2v => {
                if !self.conditioned_frames.contains(&0) {
                    return Err(Error::invalid(
                        "image-to-video requires frame 0 in conditioned_frames",
                    ));
                }
            }
            TaskKind::T2v | TaskKind::T2i => {
                if !self.conditioned_frames.is_empty() {
                    return Err(Error::invalid(format!(
                        "{} carries no conditioned frames",
                        self.kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Channel-concatenated conditioned input (frames, h, w, 2C+1).
pub fn assemble_condition<E: Scalar>(
    noisy: &Tensor<E>,
    refs: &Tensor<E>,
    spec: &TaskSpec,
) -> Result<Tensor<E>> {
    spec.validate()?;
    if noisy.shape() != refs.shape() {
        return Err(Error::ShapeMismatch {
            op: "assemble_condition",
            lhs: noisy.shape().to_vec(),
            rhs: refs.shape().to_vec(),
        });
    }
    let (frames, h, w, c) = (
        noisy.shape()[0],
        noisy.shape()[1],
        noisy.shape()[2],
        noisy.shape()[3],
    );
    for &f in &spec.conditioned_frames {
        if f >= frames {
            return Err(Error::invalid(format!(
                "conditioned frame {f} out of range 0..{frames}"
            )));
        }
    }
    let out_c = 2 * c + 1;
    let mut out = vec![E::ZERO; frames * h * w * out_c];
    for f in 0..frames {
        let conditioned = spec.conditioned_frames.contains(&f);
        for y in 0..h {
            for x in 0..w {
                let src = ((f * h + y) * w + x) * c;
                let dst = ((f * h + y) * w + x) * out_c;
                out[dst..dst + c].copy_from_slice(&noisy.data()[src..src + c]);
                if conditioned {
                    out[dst + c..dst + 2 * c].copy_from_slice(&refs.data()[src..src + c]);
                    out[dst + 2 * c] = E::ONE;
                }
            }
        }
    }
    Tensor::from_vec(&[frames, h, w, out_c], out)
}

/// Per-frame loss weights: conditioned frames are excluded from the
/// flow-matching objective.
pub fn loss_weights<E: Scalar>(latent_shape: &[usize], spec: &TaskSpec) -> Tensor<E> {
    let mut t = Tensor::full(latent_shape, E::ONE);
    let frame = latent_shape[1] * latent_shape[2] * latent_shape[3];
    let data = t.data_mut();
    for &f in &spec.conditioned_frames {
        for v in &mut data[f * frame..(f + 1) * frame] {
            *v = E::ZERO;
        }
    }
    t
}

/// Categorical task draw from configured proportions; deterministic under
/// the caller's rng stream.
pub fn sample_task_mix(proportions: &[(TaskKind, f64)], rng: &mut Rng) -> Result<TaskSpec> {
    if proportions.is_empty() {
        return Err(Error::invalid("empty task mix"));
    }
    let mut total = 0.0;
    for (_, w) in proportions {
        if *w < 0.0 {
            return Err(Error::invalid(format!("negative task weight {w}")));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "task weights sum to {total}, expected 1"
        )));
    }
    let weights: Vec<f64> = proportions.iter().map(|(_, w)| *w).collect();
    let kind = proportions[rng.weighted(&weights)].0;
    Ok(match kind {
        TaskKind::T2i => TaskSpec::t2i(),
        TaskKind::T2v => TaskSpec::t2v(),
        TaskKind::I2v => TaskSpec::i2v(),
    })
}

/// Pretrain task proportions: 20% image-to-video.
pub fn pretrain_mix() -> Vec<(TaskKind, f64)> {
    vec![
        (TaskKind::I2v, 0.20),
        (TaskKind::T2v, 0.75),
        (TaskKind::T2i, 0.05),
    ]
}

/// Continue-training proportions: image-to-video raised to 40%.
pub fn ct_mix() -> Vec<(TaskKind, f64)> {
    vec![
        (TaskKind::I2v, 0.40),
        (TaskKind::T2v, 0.55),
        (TaskKind::T2i, 0.05),
    ]
}

/// A clip prepared for the diffusion trainer: per-shot latents concatenated
/// in shot order plus the interleaved token sequence.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub latent: Tensor<f32>,
    pub seq: TokenSequence,
    /// Latent frame count per shot, in order.
    pub shot_latent_frames: Vec<usize>,
}

/// Split a pixel clip at its shot boundaries, encode each shot separately
/// (hard cuts break temporal causality), and build the interleaved
/// text/visual sequence with one caption per shot.
///
/// `captions` carries one caption per shot, in temporal order.
pub fn build_multishot_batch(
    record: &ClipRecord,
    clip: &Tensor<f32>,
    captions: &[String],
    vae: &Vae<f32>,
    max_text_tokens: usize,
) -> Result<PreparedClip> {
    let frames = clip.shape()[0];
    record.validate(frames)?;
    let mut bounds = vec![0usize];
    bounds.extend(&record.shot_boundaries);
    bounds.push(frames);
    let n_shots = bounds.len() - 1;
    if captions.len() != n_shots {
        return Err(Error::invalid(format!(
            "{} captions for {} shots",
            captions.len(),
            n_shots
        )));
    }
    let mut latents = Vec::new();
    let mut layouts = Vec::new();
    let mut shot_latent_frames = Vec::new();
    for s in 0..n_shots {
        let (lo, hi) = (bounds[s], bounds[s + 1]);
        let shot_clip = clip.slice(0, lo, hi - lo)?;
        let z = vae.encode_mean(&shot_clip)?;
        let mut ids = tokenize(&captions[s]);
        ids.truncate(max_text_tokens);
        layouts.push(ShotLayout {
            caption_ids: ids,
            frames: z.shape()[0],
            h: z.shape()[1],
            w: z.shape()[2],
        });
        shot_latent_frames.push(z.shape()[0]);
        latents.push(z);
    }
    let refs: Vec<&Tensor<f32>> = latents.iter().collect();
    let latent = Tensor::concat(&refs, 0)?;
    let seq = build_positions(&layouts)?;
    Ok(PreparedClip {
        latent,
        seq,
        shot_latent_frames,
    })
}

/// Latent normalization scale: the reciprocal RMS of a latent sample, so
/// diffusion sees roughly unit-scale inputs.
pub fn latent_scale(latents: &[Tensor<f32>]) -> f64 {
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for z in latents {
        for &v in z.data() {
            sum_sq += (v as f64) * (v as f64);
        }
        count += z.numel();
    }
    let rms = (sum_sq / count.max(1) as f64).sqrt();
    if rms > 1e-6 {
        1.0 / rms
    } else {
        1.0
    }
}

/// Single-shot convenience used throughout training and sampling.
pub fn single_shot_sequence(
    caption: &str,
    latent_shape: &[usize],
    max_text_tokens: usize,
) -> Result<TokenSequence> {
    let mut ids = tokenize(caption);
    ids.truncate(max_text_tokens);
    build_positions(&[ShotLayout {
        caption_ids: ids,
        frames: latent_shape[0],
        h: latent_shape[1],
        w: latent_shape[2],
    }])
}
