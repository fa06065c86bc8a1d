//! Reward-maximization fine-tuning: simulate inference down to a rollout
//! timestep, predict the clean sample in one differentiable shot, decode it
//! through the frozen codec and ascend the composite reward, with reward
//! models frozen during policy updates. Multi-round iteration alternates
//! reward-model refreshes with policy phases.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::codec::Vae;
use crate::conditioning::single_shot_sequence;
use crate::diffusion::sampler::{euler_step, CondMode, SampleSpec};
use crate::diffusion::FlowConfig;
use crate::dit::{dit_forward, DiTModel, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{reduce_grads, Adam, Binder};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::rewards::{RewardCtx, RewardModel};
use super::rm::{rm_train_step, PreferencePair};

/// A fixed, seeded evaluation prompt so reward curves are comparable across
/// runs.
#[derive(Debug, Clone)]
pub struct EvalPrompt {
    pub caption: String,
    pub ctx: RewardCtx,
    pub latent_shape: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RlhfConfig {
    pub flow: FlowConfig,
    /// Rollout timestep range in shifted space.
    pub t_lo: f64,
    pub t_hi: f64,
    /// No-grad Euler steps simulating inference from t = 1 to the rollout t.
    pub prefix_steps: usize,
    pub weights: Vec<f64>,
    pub latent_scale: f64,
    pub max_text_tokens: usize,
}

impl RlhfConfig {
    pub fn validate(&self, n_rms: usize) -> Result<()> {
        if self.weights.len() != n_rms {
            return Err(Error::invalid(format!(
                "{} weights for {} reward models",
                self.weights.len(),
                n_rms
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("reward weights sum to {sum}")));
        }
        Ok(())
    }
}

/// One-shot clean prediction: x0_hat = x_t - t * v_hat, differentiable
/// through the model. Requires t in (0, 1].
pub fn predict_x0<E: Scalar>(
    model: &DiTModel<E>,
    bind: &Binder<E>,
    x_t: &Tensor<E>,
    t: f64,
    seq: &TokenSequence,
    cond: &CondMode<E>,
) -> Result<Var<E>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("predict_x0 needs t in (0,1], got {t}")));
    }
    let cond_input = match cond {
        CondMode::Masked { task, reference } => {
            let refs = match reference {
                Some(r) => r.clone(),
                None => Tensor::zeros(x_t.shape()),
            };
            crate::conditioning::assemble_condition(x_t, &refs, task)?
        }
        CondMode::Channel { reference } => Tensor::concat(&[x_t, reference], 3)?,
    };
    let v = dit_forward(model, bind, &Var::constant(cond_input), seq, t, None)?;
    Var::constant(x_t.clone()).sub(&v.scale(E::from_f64(t)))
}

/// Composite reward of a decoded video under frozen reward models.
pub fn composite_reward<E: Scalar>(
    rms: &[RewardModel<E>],
    weights: &[f64],
    video: &Var<E>,
    ctx: &RewardCtx,
) -> Result<(Var<E>, Vec<f64>)> {
    let frozen = Binder::frozen();
    let mut total: Option<Var<E>> = None;
    let mut parts = Vec::with_capacity(rms.len());
    for (rm, &w) in rms.iter().zip(weights) {
        let r = rm.score(&frozen, video, ctx)?;
        parts.push(r.value().item().to_f64());
        if w == 0.0 {
            continue;
        }
        let term = r.scale(E::from_f64(w));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("all reward weights are zero"))?;
    Ok((total, parts))
}

#[derive(Debug, Clone)]
pub struct RlhfStepReport {
    pub composite: f64,
    pub per_rm: Vec<f64>,
    pub skipped: bool,
}

/// Rollout + decode for one prompt: no-grad inference prefix to a sampled
/// rollout time, then the differentiable clean-shot decode.
#[allow(clippy::too_many_arguments)]
fn rollout_video<E: Scalar>(
    model: &DiTModel<E>,
    vae: &Vae<E>,
    prompt: &EvalPrompt,
    cond: &CondMode<E>,
    cfg: &RlhfConfig,
    bind: &Binder<E>,
    rng: &mut Rng,
) -> Result<Var<E>> {
    let seq = single_shot_sequence(&prompt.caption, &prompt.latent_shape, cfg.max_text_tokens)?;
    let t_roll = rng.range(cfg.t_lo, cfg.t_hi);
    let spec = SampleSpec {
        cond: cond.clone(),
        latent_shape: prompt.latent_shape.clone(),
        seed: rng.next_u64(),
        guidance: 1.0,
        uncond_seq: None,
    };
    let mut rng_init = Rng::derive(spec.seed, &["sample", "init"]);
    let eps = Tensor::<E>::randn(&spec.latent_shape, 1.0, &mut rng_init);
    let mut x = eps.clone();
    let mut calls = 0usize;
    for s in 0..cfg.prefix_steps {
        let a = 1.0 + (t_roll - 1.0) * s as f64 / cfg.prefix_steps as f64;
        let b = 1.0 + (t_roll - 1.0) * (s + 1) as f64 / cfg.prefix_steps as f64;
        x = euler_step(model, &seq, &spec, &x, &eps, a, b, &mut calls)?;
    }
    let x0 = predict_x0(model, bind, &x, t_roll, &seq, cond)?;
    let unscaled = x0.scale(E::from_f64(1.0 / cfg.latent_scale));
    let frozen_vae = Binder::frozen();
    vae.decode(&frozen_vae, &unscaled)
}

/// One policy ascent step over a batch of prompts. Reward models stay
/// frozen; a non-finite composite skips the update and reports it.
#[allow(clippy::too_many_arguments)]
pub fn reward_feedback_step<E: Scalar>(
    model: &mut DiTModel<E>,
    vae: &Vae<E>,
    opt: &mut Adam,
    rms: &[RewardModel<E>],
    prompts: &[EvalPrompt],
    cfg: &RlhfConfig,
    seed: u64,
    step: u64,
) -> Result<RlhfStepReport> {
    cfg.validate(rms.len())?;
    if prompts.is_empty() {
        return Err(Error::invalid("empty prompt batch"));
    }
    let results: Vec<Result<(f64, Vec<f64>, Vec<(String, Tensor<E>)>)>> = {
        let m = &*model;
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let mut rng = Rng::derive(seed, &["rlhf", &step.to_string(), &i.to_string()]);
                let bind = Binder::trainable();
                let cond = CondMode::Masked {
                    task: crate::conditioning::TaskSpec::t2v(),
                    reference: None,
                };
                let video = rollout_video(m, vae, prompt, &cond, cfg, &bind, &mut rng)?;
                let (total, parts) = composite_reward(rms, &cfg.weights, &video, &prompt.ctx)?;
                let value = total.value().item().to_f64();
                if !value.is_finite() {
                    return Ok((f64::NAN, parts, Vec::new()));
                }
                // ascend: minimize the negative composite
                total
                    .neg()
                    .scale(E::from_f64(1.0 / prompts.len() as f64))
                    .backward()?;
                Ok((value, parts, bind.grads()))
            })
            .collect()
    };
    let mut composite = 0.0;
    let mut per_rm = vec![0.0; rms.len()];
    let mut per_worker = Vec::new();
    let mut any_nan = false;
    for r in results {
        let (value, parts, grads) = r?;
        if value.is_nan() {
            any_nan = true;
            continue;
        }
        composite += value / prompts.len() as f64;
        for (acc, p) in per_rm.iter_mut().zip(&parts) {
            *acc += p / prompts.len() as f64;
        }
        per_worker.push(grads);
    }
    if any_nan {
        return Ok(RlhfStepReport {
            composite,
            per_rm,
            skipped: true,
        });
    }
    let grads = reduce_grads(per_worker);
    opt.apply(model.params_mut(), &grads)?;
    Ok(RlhfStepReport {
        composite,
        per_rm,
        skipped: false,
    })
}

/// Refiner policy step: identical contract with the low-resolution latent
/// held fixed as channel conditioning (it is data, so it gets no gradient).
#[allow(clippy::too_many_arguments)]
pub fn refiner_rlhf_step<E: Scalar>(
    refiner: &mut DiTModel<E>,
    vae: &Vae<E>,
    opt: &mut Adam,
    rms: &[RewardModel<E>],
    lr_latents: &[(EvalPrompt, Tensor<E>)],
    cfg: &RlhfConfig,
    factor: usize,
    seed: u64,
    step: u64,
) -> Result<RlhfStepReport> {
    cfg.validate(rms.len())?;
    if lr_latents.is_empty() {
        return Err(Error::invalid("empty refiner batch"));
    }
    let results: Vec<Result<(f64, Vec<f64>, Vec<(String, Tensor<E>)>)>> = {
        let m = &*refiner;
        lr_latents
            .par_iter()
            .enumerate()
            .map(|(i, (prompt, lr))| {
                let mut rng =
                    Rng::derive(seed, &["refiner_rlhf", &step.to_string(), &i.to_string()]);
                let lr_up = crate::diffusion::upsample_latent(lr, factor)?;
                let bind = Binder::trainable();
                let cond = CondMode::Channel {
                    reference: lr_up.clone(),
                };
                let hr_prompt = EvalPrompt {
                    latent_shape: lr_up.shape().to_vec(),
                    ..prompt.clone()
                };
                let video = rollout_video(m, vae, &hr_prompt, &cond, cfg, &bind, &mut rng)?;
                let (total, parts) = composite_reward(rms, &cfg.weights, &video, &prompt.ctx)?;
                let value = total.value().item().to_f64();
                if !value.is_finite() {
                    return Ok((f64::NAN, parts, Vec::new()));
                }
                total
                    .neg()
                    .scale(E::from_f64(1.0 / lr_latents.len() as f64))
                    .backward()?;
                Ok((value, parts, bind.grads()))
            })
            .collect()
    };
    let mut composite = 0.0;
    let mut per_rm = vec![0.0; rms.len()];
    let mut per_worker = Vec::new();
    let mut any_nan = false;
    for r in results {
        let (value, parts, grads) = r?;
        if value.is_nan() {
            any_nan = true;
            continue;
        }
        composite += value / lr_latents.len() as f64;
        for (acc, p) in per_rm.iter_mut().zip(&parts) {
            *acc += p / lr_latents.len() as f64;
        }
        per_worker.push(grads);
    }
    if any_nan {
        return Ok(RlhfStepReport {
            composite,
            per_rm,
            skipped: true,
        });
    }
    let grads = reduce_grads(per_worker);
    opt.apply(refiner.params_mut(), &grads)?;
    Ok(RlhfStepReport {
        composite,
        per_rm,
        skipped: false,
    })
}

/// Mean composite of the frozen toy scorers over fixed eval prompts,
/// from full sampling plus decode. Used for cross-run-comparable curves.
pub fn eval_composite<E: Scalar>(
    model: &DiTModel<E>,
    vae: &Vae<E>,
    rms: &[RewardModel<E>],
    weights: &[f64],
    prompts: &[EvalPrompt],
    cfg: &RlhfConfig,
    nfe: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let results: Vec<Result<f64>> = prompts
        .par_iter()
        .map(|prompt| {
            let seq =
                single_shot_sequence(&prompt.caption, &prompt.latent_shape, cfg.max_text_tokens)?;
            let spec = SampleSpec::new(
                crate::conditioning::TaskSpec::t2v(),
                None,
                &prompt.latent_shape,
                prompt.seed,
            );
            let (latent, _) = crate::diffusion::euler_sample(model, &seq, &spec, &cfg.flow, nfe)?;
            let video = vae.decode_tensor(&latent.scale(E::from_f64(1.0 / cfg.latent_scale)))?;
            let (r, _) = composite_reward(rms, weights, &Var::constant(video), &prompt.ctx)?;
            Ok(r.value().item().to_f64())
        })
        .collect();
    for r in results {
        total += r? / prompts.len() as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub rm_accuracy: f64,
    pub eval_composite: f64,
}

/// Multi-round iteration: refresh the learned reward models on fresh pairs
/// labeled from current model outputs, then run a policy phase against the
/// refreshed (frozen) models.
#[allow(clippy::too_many_arguments)]
pub fn multi_round<E: Scalar>(
    model: &mut DiTModel<E>,
    vae: &Vae<E>,
    learned_rms: &mut [RewardModel<E>],
    label_rms: &[RewardModel<E>],
    label_weights: &[f64],
    prompts: &[EvalPrompt],
    cfg: &RlhfConfig,
    rounds: usize,
    rm_steps: usize,
    policy_steps: usize,
    policy_lr: f64,
    seed: u64,
) -> Result<Vec<RoundReport>> {
    if rounds == 0 {
        return Err(Error::invalid("rounds must be >= 1"));
    }
    let mut reports = Vec::new();
    for round in 0..rounds {
        // fresh pairs scored from current model outputs, labeled by the
        // fixed scorers standing in for human preference
        let mut pairs: Vec<PreferencePair<E>> = Vec::new();
        for (i, prompt) in prompts.iter().enumerate() {
            let seq =
                single_shot_sequence(&prompt.caption, &prompt.latent_shape, cfg.max_text_tokens)?;
            let mut videos = Vec::new();
            for variant in 0..2u64 {
                let spec = SampleSpec::new(
                    crate::conditioning::TaskSpec::t2v(),
                    None,
                    &prompt.latent_shape,
                    seed ^ (round as u64 * 1000 + i as u64 * 2 + variant),
                );
                let (latent, _) =
                    crate::diffusion::euler_sample(model, &seq, &spec, &cfg.flow, 8)?;
                let video =
                    vae.decode_tensor(&latent.scale(E::from_f64(1.0 / cfg.latent_scale)))?;
                let (r, _) = composite_reward(
                    label_rms,
                    label_weights,
                    &Var::constant(video.clone()),
                    &prompt.ctx,
                )?;
                videos.push((video, r.value().item().to_f64()));
            }
            let (a, b) = (videos.remove(0), videos.remove(0));
            let (best, worst) = if a.1 >= b.1 { (a.0, b.0) } else { (b.0, a.0) };
            if best.data() == worst.data() {
                continue;
            }
            pairs.push(PreferencePair {
                prompt: prompt.caption.clone(),
                ctx: prompt.ctx,
                video_best: best,
                video_worst: worst,
                dimension: "composite".into(),
            });
        }
        let mut acc_sum = 0.0;
        for rm in learned_rms.iter_mut() {
            let mut opt = Adam::new(3e-3);
            for s in 0..rm_steps {
                let pair = &pairs[s % pairs.len()];
                rm_train_step(rm, &mut opt, pair)?;
            }
            acc_sum += super::rm::rm_accuracy(rm, &pairs)?;
        }
        // policy phase against the refreshed, frozen learned models
        let mut opt = Adam::new(policy_lr);
        let rm_weights = vec![1.0 / learned_rms.len() as f64; learned_rms.len()];
        let policy_cfg = RlhfConfig {
            weights: rm_weights,
            ..cfg.clone()
        };
        for s in 0..policy_steps as u64 {
            let batch: Vec<EvalPrompt> = prompts.iter().take(4).cloned().collect();
            reward_feedback_step(
                model,
                vae,
                &mut opt,
                learned_rms,
                &batch,
                &policy_cfg,
                seed ^ (round as u64 + 77),
                s,
            )?;
        }
        let eval = eval_composite(model, vae, label_rms, label_weights, prompts, cfg, 8)?;
        reports.push(RoundReport {
            round,
            rm_accuracy: acc_sum / learned_rms.len().max(1) as f64,
            eval_composite: eval,
        });
    }
    Ok(reports)
}
