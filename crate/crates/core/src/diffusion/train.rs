//! Flow-matching training: task-mixed batches, masked velocity regression,
//! and the progressive stage plan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_condition, loss_weights, sample_task_mix, TaskKind, TaskSpec};
use crate::dit::{build_positions, dit_forward, DiTModel, ShotLayout, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{reduce_grads, Adam, Binder};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::{interpolate, sample_timestep, shift_timestep, velocity_target, FlowConfig};

/// One prepared training clip: scaled latents (shots concatenated) plus the
/// caption variants the task mix may need.
#[derive(Debug, Clone)]
pub struct TrainSample<E: Scalar> {
    pub latent: Tensor<E>,
    pub shot_latent_frames: Vec<usize>,
    pub captions_long: Vec<String>,
    pub captions_short: Vec<String>,
    /// Static-only caption used when the task draw is text-to-image.
    pub caption_image: String,
}

#[derive(Debug, Clone)]
pub struct TrainContext {
    pub flow: FlowConfig,
    pub mix: Vec<(TaskKind, f64)>,
    /// Probability of using the motion-only caption variant (continue
    /// training raises this from zero).
    pub short_caption_prob: f64,
    pub max_text_tokens: usize,
}

fn tokenize_captions(captions: &[String], max_tokens: usize) -> Vec<Vec<usize>> {
    captions
        .iter()
        .map(|c| {
            let mut ids = crate::datagen::caption::tokenize(c);
            ids.truncate(max_tokens);
            ids
        })
        .collect()
}

/// Sequence + clean latent + task for one drawn sample.
fn prepare_draw<E: Scalar>(
    sample: &TrainSample<E>,
    ctx: &TrainContext,
    rng: &mut Rng,
) -> Result<(Tensor<E>, TokenSequence, TaskSpec)> {
    let task = sample_task_mix(&ctx.mix, rng)?;
    let (h, w) = (sample.latent.shape()[1], sample.latent.shape()[2]);
    match task.kind {
        TaskKind::T2i => {
            // single-latent-frame clip with the static caption
            let x0 = sample.latent.slice(0, 0, 1)?;
            let ids = tokenize_captions(
                std::slice::from_ref(&sample.caption_image),
                ctx.max_text_tokens,
            );
            let seq = build_positions(&[ShotLayout {
                caption_ids: ids[0].clone(),
                frames: 1,
                h,
                w,
            }])?;
            Ok((x0, seq, TaskSpec::t2i()))
        }
        _ => {
            let use_short = rng.uniform() < ctx.short_caption_prob;
            let captions = if use_short {
                &sample.captions_short
            } else {
                &sample.captions_long
            };
            if captions.len() != sample.shot_latent_frames.len() {
                return Err(Error::invalid(format!(
                    "{} captions for {} shots",
                    captions.len(),
                    sample.shot_latent_frames.len()
                )));
            }
            let ids = tokenize_captions(captions, ctx.max_text_tokens);
            let layouts: Vec<ShotLayout> = sample
                .shot_latent_frames
                .iter()
                .zip(ids)
                .map(|(&frames, caption_ids)| ShotLayout {
                    caption_ids,
                    frames,
                    h,
                    w,
                })
                .collect();
            let seq = build_positions(&layouts)?;
            Ok((sample.latent.clone(), seq, task))
        }
    }
}

/// Velocity regression loss over unmasked cells only: conditioned frames
/// carry zero weight and contribute zero gradient.
pub fn masked_velocity_loss<E: Scalar>(
    pred: &crate::autodiff::Var<E>,
    target: &Tensor<E>,
    weights: &Tensor<E>,
) -> Result<crate::autodiff::Var<E>> {
    let active = weights.sum().to_f64();
    if active == 0.0 {
        return Err(Error::invalid("loss mask excludes every frame"));
    }
    let diff = pred.sub(&crate::autodiff::Var::constant(target.clone()))?;
    let masked = diff
        .sqr()
        .mul(&crate::autodiff::Var::constant(weights.clone()))?;
    Ok(masked.sum().scale(E::from_f64(1.0 / active)))
}

/// One optimizer step of masked velocity regression over a batch.
/// Returns the mean loss; non-finite losses abort before the update.
pub fn train_step<E: Scalar>(
    model: &mut DiTModel<E>,
    opt: &mut Adam,
    batch: &[TrainSample<E>],
    ctx: &TrainContext,
    seed: u64,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<Result<(f64, Vec<(String, Tensor<E>)>)>> = {
        let m = &*model;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut rng = Rng::derive(seed, &["dit", &step.to_string(), &i.to_string()]);
                let (x0, seq, task) = prepare_draw(sample, ctx, &mut rng)?;
                let t_raw = sample_timestep(&ctx.flow, &mut rng);
                let t = shift_timestep(t_raw, ctx.flow.shift_scale)?;
                let eps = Tensor::<E>::randn(x0.shape(), 1.0, &mut rng);
                let xt = interpolate(&x0, &eps, t)?;
                let v = velocity_target(&x0, &eps)?;
                let cond = assemble_condition(&xt, &x0, &task)?;
                let bind = Binder::trainable();
                let pred = dit_forward(
                    m,
                    &bind,
                    &crate::autodiff::Var::constant(cond),
                    &seq,
                    t,
                    None,
                )?;
                let weights = loss_weights::<E>(x0.shape(), &task);
                let loss = masked_velocity_loss(&pred, &v, &weights)?;
                let value = loss.value().item().to_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite("flow loss"));
                }
                loss.scale(E::from_f64(1.0 / batch.len() as f64)).backward()?;
                Ok((value, bind.grads()))
            })
            .collect()
    };
    let mut total = 0.0;
    let mut per_worker = Vec::new();
    for r in results {
        let (value, grads) = r?;
        total += value / batch.len() as f64;
        per_worker.push(grads);
    }
    let grads = reduce_grads(per_worker);
    opt.apply(model.params_mut(), &grads)?;
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Pixel resolution of this stage's clips.
    pub resolution: usize,
    /// Pixel frames per shot.
    pub frames: usize,
    /// Frames per time unit; the desk analog of frame-rate increases.
    pub fps_analog: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mix: Vec<(TaskKind, f64)>,
    pub short_caption_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("empty stage plan"));
        }
        let mut prev = 0usize;
        for (i, s) in self.stages.iter().enumerate() {
            if s.resolution < prev {
                return Err(Error::invalid(format!(
                    "stage {i} resolution {} below previous {prev}: resolutions must be non-decreasing",
                    s.resolution
                )));
            }
            prev = s.resolution;
            if s.steps == 0 || s.batch_size == 0 {
                return Err(Error::invalid(format!("stage {i} has zero steps or batch")));
            }
            if s.frames == 0 {
                return Err(Error::invalid(format!("stage {i} has zero frames")));
            }
            let total: f64 = s.mix.iter().map(|(_, w)| w).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "stage {i} task mix sums to {total}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-stage summary returned by the plan runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub final_loss: f64,
    pub shift_scale: f64,
}

/// Run the progressive plan: sequential training with per-stage resolution,
/// proportion and caption-style overrides, and a resolution-aware shift
/// derived from the stage's token count relative to stage 0.
///
/// `data` supplies the batch for (stage index, step); `on_stage_end` is
/// called after each stage (checkpointing lives with the caller).
pub fn run_stage_plan<E: Scalar, D, F, T>(
    model: &mut DiTModel<E>,
    plan: &StagePlan,
    base_flow: &FlowConfig,
    max_text_tokens: usize,
    seed: u64,
    token_count: T,
    mut data: D,
    mut on_stage_end: F,
) -> Result<Vec<StageReport>>
where
    D: FnMut(usize, u64, usize) -> Result<Vec<TrainSample<E>>>,
    F: FnMut(usize, &DiTModel<E>, &StageReport) -> Result<()>,
    T: Fn(&StageSpec) -> usize,
{
    plan.validate()?;
    let base_tokens = token_count(&plan.stages[0]);
    let mut reports = Vec::new();
    for (si, stage) in plan.stages.iter().enumerate() {
        let mut opt = Adam::new(stage.lr);
        opt.clip_norm = Some(5.0);
        let shift = super::shift_for_tokens(token_count(stage), base_tokens);
        let ctx = TrainContext {
            flow: FlowConfig {
                shift_scale: shift * base_flow.shift_scale,
                ..base_flow.clone()
            },
            mix: stage.mix.clone(),
            short_caption_prob: stage.short_caption_prob,
            max_text_tokens,
        };
        let mut last = f64::NAN;
        for step in 0..stage.steps as u64 {
            let batch = data(si, step, stage.batch_size)?;
            last = train_step(model, &mut opt, &batch, &ctx, seed ^ si as u64, step)?;
        }
        let report = StageReport {
            name: stage.name.clone(),
            steps: stage.steps,
            final_loss: last,
            shift_scale: ctx.flow.shift_scale,
        };
        on_stage_end(si, model, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
