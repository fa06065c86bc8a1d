//! Cascaded refiner: a second diffusion model at the high-resolution grid,
//! conditioned on the channel-concatenated upsampled low-resolution latent
//! and initialized from the pre-trained base model.

use rayon::prelude::*;

use crate::dit::{dit_forward, DiTModel, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{reduce_grads, Adam, Binder};
use crate::rng::Rng;
use crate::tensor::{upsample_nearest_hw, Scalar, Tensor};

use super::sampler::{euler_sample, CondMode, SampleSpec};
use super::{interpolate, sample_timestep, shift_timestep, velocity_target, FlowConfig};

/// Spatially upsample a low-resolution latent to the refiner grid.
pub fn upsample_latent<E: Scalar>(lr: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    upsample_nearest_hw(lr, factor, factor)
}

/// Refiner input: [noisy | upsampled-LR] along channels — 2C, no mask plane.
pub fn refiner_condition<E: Scalar>(noisy: &Tensor<E>, lr_up: &Tensor<E>) -> Result<Tensor<E>> {
    if noisy.shape() != lr_up.shape() {
        return Err(Error::ShapeMismatch {
            op: "refiner_condition",
            lhs: noisy.shape().to_vec(),
            rhs: lr_up.shape().to_vec(),
        });
    }
    Tensor::concat(&[noisy, lr_up], 3)
}

/// Initialize a refiner from the base model: identical weights everywhere,
/// with the input projection's reference rows reused for the low-resolution
/// conditioning channels and the mask row dropped (2C+1 -> 2C inputs).
pub fn refiner_from_base<E: Scalar>(base: &DiTModel<E>) -> Result<DiTModel<E>> {
    let c = base.cfg.out_channels;
    if base.cfg.in_channels != 2 * c + 1 {
        return Err(Error::invalid(format!(
            "base model input channels {} are not 2C+1 for C = {c}",
            base.cfg.in_channels
        )));
    }
    let mut refiner = base.clone();
    refiner.cfg.in_channels = 2 * c;
    let w = base.token_in.w.value.clone(); // (2C+1, d)
    let d = w.shape()[1];
    let trimmed = w.slice(0, 0, 2 * c)?;
    refiner.token_in.w.value = trimmed.reshape(&[2 * c, d])?;
    Ok(refiner)
}

/// One refiner training step on (LR latent, HR latent) pairs: velocity
/// regression at the HR grid with the upsampled LR latent as conditioning.
pub fn refiner_train_step<E: Scalar>(
    model: &mut DiTModel<E>,
    opt: &mut Adam,
    batch: &[(Tensor<E>, Tensor<E>, TokenSequence)],
    flow: &FlowConfig,
    factor: usize,
    seed: u64,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty refiner batch"));
    }
    let results: Vec<Result<(f64, Vec<(String, Tensor<E>)>)>> = {
        let m = &*model;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, (lr, hr, seq))| {
                let lr_up = upsample_latent(lr, factor)?;
                if lr_up.shape() != hr.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "refiner upsample factor",
                        lhs: lr_up.shape().to_vec(),
                        rhs: hr.shape().to_vec(),
                    });
                }
                let mut rng =
                    Rng::derive(seed, &["refiner", &step.to_string(), &i.to_string()]);
                let t_raw = sample_timestep(flow, &mut rng);
                let t = shift_timestep(t_raw, flow.shift_scale)?;
                let eps = Tensor::<E>::randn(hr.shape(), 1.0, &mut rng);
                let xt = interpolate(hr, &eps, t)?;
                let v = velocity_target(hr, &eps)?;
                let cond = refiner_condition(&xt, &lr_up)?;
                let bind = Binder::trainable();
                let pred = dit_forward(
                    m,
                    &bind,
                    &crate::autodiff::Var::constant(cond),
                    seq,
                    t,
                    None,
                )?;
                let loss = crate::autodiff::mse(&pred, &crate::autodiff::Var::constant(v))?;
                let value = loss.value().item().to_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite("refiner loss"));
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

/// Generate the high-resolution latent conditioned on a low-resolution clip.
pub fn refine<E: Scalar>(
    refiner: &DiTModel<E>,
    lr_latent: &Tensor<E>,
    seq: &TokenSequence,
    flow: &FlowConfig,
    factor: usize,
    nfe: usize,
    seed: u64,
) -> Result<(Tensor<E>, usize)> {
    let lr_up = upsample_latent(lr_latent, factor)?;
    let expected_in = 2 * refiner.cfg.out_channels;
    if refiner.cfg.in_channels != expected_in {
        return Err(Error::invalid(format!(
            "refiner expects {} input channels, model has {}",
            expected_in, refiner.cfg.in_channels
        )));
    }
    let spec = SampleSpec {
        cond: CondMode::Channel {
            reference: lr_up.clone(),
        },
        latent_shape: lr_up.shape().to_vec(),
        seed,
        guidance: 1.0,
        uncond_seq: None,
    };
    euler_sample(refiner, seq, &spec, flow, nfe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::single_shot_sequence;
    use crate::dit::DiTConfig;

    fn base_model() -> DiTModel<f32> {
        let cfg = DiTConfig {
            d_model: 24,
            n_heads: 2,
            n_spatial_layers: 1,
            n_temporal_layers: 1,
            window_h: 2,
            window_w: 2,
            rope_base: 100.0,
            in_channels: 9, // 2C+1 with C=4
            out_channels: 4,
            vocab_size: 40,
            mlp_ratio: 2,
            max_text_tokens: 16,
        };
        DiTModel::init(&cfg, &mut Rng::seed_from(310)).unwrap()
    }

    #[test]
    fn refiner_input_channel_count_is_2c() {
        let base = base_model();
        let refiner = refiner_from_base(&base).unwrap();
        assert_eq!(refiner.cfg.in_channels, 8);
        assert_eq!(refiner.token_in.w.value.shape(), &[8, 24]);
        // weights shared with the base except the dropped mask row
        assert_eq!(
            refiner.token_in.w.value.data(),
            &base.token_in.w.value.data()[..8 * 24]
        );
    }

    #[test]
    fn refine_produces_hr_shaped_finite_output() {
        let base = base_model();
        let refiner = refiner_from_base(&base).unwrap();
        let mut rng = Rng::seed_from(311);
        let lr = Tensor::<f32>::randn(&[2, 2, 2, 4], 1.0, &mut rng);
        let seq = single_shot_sequence("a red circle", &[2, 4, 4, 4], 16).unwrap();
        let flow = FlowConfig::default();
        let (hr, nfe) = refine(&refiner, &lr, &seq, &flow, 2, 1, 5).unwrap();
        assert_eq!(hr.shape(), &[2, 4, 4, 4]);
        assert_eq!(nfe, 1);
        assert!(hr.all_finite());
    }

    #[test]
    fn factor_mismatch_rejected() {
        let base = base_model();
        let mut refiner = refiner_from_base(&base).unwrap();
        let mut rng = Rng::seed_from(312);
        let lr = Tensor::<f32>::randn(&[2, 2, 2, 4], 1.0, &mut rng);
        let hr = Tensor::<f32>::randn(&[2, 8, 8, 4], 1.0, &mut rng);
        let seq = single_shot_sequence("x", &[2, 4, 4, 4], 16).unwrap();
        let mut opt = Adam::new(1e-4);
        let err = refiner_train_step(
            &mut refiner,
            &mut opt,
            &[(lr, hr, seq)],
            &FlowConfig::default(),
            2,
            0,
            0,
        );
        assert!(err.is_err());
    }
}
