//! Codec training: L1 + KL + gradient-difference perceptual proxy +
//! adversarial hinge losses, the discriminator step, and thin-decoder
//! retraining against a frozen encoder.

use rayon::prelude::*;

use crate::autodiff::{l1, Var};
use crate::error::{Error, Result};
use crate::nn::{reduce_grads, Adam, Binder};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::model::{Decoder, Discriminator, Vae};

#[derive(Debug, Clone, Copy, Default)]
pub struct CodecLosses {
    pub l1: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// KL divergence of the diagonal posterior against the unit Gaussian, mean
/// over latent cells: 0.5 * (mu^2 + e^logvar - 1 - logvar). Non-negative.
pub fn kl_divergence<E: Scalar>(mean: &Var<E>, logvar: &Var<E>) -> Result<Var<E>> {
    let half = E::from_f64(0.5);
    let term = mean
        .sqr()
        .add(&logvar.exp())?
        .add_scalar(-E::ONE)
        .sub(logvar)?;
    Ok(term.scale(half).mean())
}

/// L1 between finite-difference image gradients of two clips: the sharpness
/// supervision standing in for a pretrained perceptual network.
pub fn gradient_difference<E: Scalar>(a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
    let h = a.shape()[1];
    let w = a.shape()[2];
    let gx = |v: &Var<E>| -> Result<Var<E>> {
        v.slice(1, 1, h - 1)?.sub(&v.slice(1, 0, h - 1)?)
    };
    let gy = |v: &Var<E>| -> Result<Var<E>> {
        v.slice(2, 1, w - 1)?.sub(&v.slice(2, 0, w - 1)?)
    };
    let loss_x = l1(&gx(a)?, &gx(b)?)?;
    let loss_y = l1(&gy(a)?, &gy(b)?)?;
    loss_x.add(&loss_y)
}

/// One VAE optimizer step over a batch of clips. Returns the loss components;
/// a non-finite total aborts before any parameter is touched.
///
/// `adv_active` gates the adversarial term (discriminator warmup).
pub fn codec_train_step<E: Scalar>(
    vae: &mut Vae<E>,
    disc: Option<&Discriminator<E>>,
    opt: &mut Adam,
    batch: &[Tensor<E>],
    adv_active: bool,
    seed: u64,
    step: u64,
) -> Result<CodecLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = vae.cfg.clone();
    let results: Vec<Result<(CodecLosses, Vec<(String, Tensor<E>)>)>> = {
        let vae_ref = &*vae;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, clip)| {
                let mut rng =
                    Rng::derive(seed, &["codec", &step.to_string(), &i.to_string()]);
                let bind = Binder::trainable();
                let x = Var::constant(clip.clone());
                let (mean, logvar) = vae_ref.encode(&bind, &x)?;
                let z = Vae::sample_latent(&mean, &logvar, &mut rng)?;
                let recon = vae_ref.decode(&bind, &z)?;
                let l1_loss = l1(&recon, &x)?;
                let kl_loss = kl_divergence(&mean, &logvar)?;
                let perc_loss = gradient_difference(&recon, &x)?;
                let mut total = l1_loss
                    .add(&kl_loss.scale(E::from_f64(cfg.kl_weight)))?
                    .add(&perc_loss.scale(E::from_f64(cfg.perc_weight)))?;
                if cfg.mse_weight > 0.0 {
                    total = total.add(
                        &crate::autodiff::mse(&recon, &x)?.scale(E::from_f64(cfg.mse_weight)),
                    )?;
                }
                let mut adv_value = 0.0;
                if let (Some(d), true) = (disc, adv_active) {
                    // discriminator weights frozen; gradient flows through
                    // its activations into the reconstruction
                    let frozen = Binder::frozen();
                    let logits = d.forward(&frozen, &recon)?;
                    let g_loss = logits.mean().neg();
                    adv_value = g_loss.value().item().to_f64();
                    total = total.add(&g_loss.scale(E::from_f64(cfg.adv_weight)))?;
                }
                let losses = CodecLosses {
                    l1: l1_loss.value().item().to_f64(),
                    kl: kl_loss.value().item().to_f64(),
                    perceptual: perc_loss.value().item().to_f64(),
                    adversarial: adv_value,
                };
                if !total.value().all_finite() {
                    return Err(Error::NonFinite("codec loss"));
                }
                total.scale(E::from_f64(1.0 / batch.len() as f64)).backward()?;
                Ok((losses, bind.grads()))
            })
            .collect()
    };
    let mut agg = CodecLosses::default();
    let mut per_worker = Vec::with_capacity(results.len());
    let n = results.len() as f64;
    for r in results {
        let (losses, grads) = r?;
        agg.l1 += losses.l1 / n;
        agg.kl += losses.kl / n;
        agg.perceptual += losses.perceptual / n;
        agg.adversarial += losses.adversarial / n;
        per_worker.push(grads);
    }
    let grads = reduce_grads(per_worker);
    opt.apply(vae.params_mut(), &grads)?;
    Ok(agg)
}

/// One discriminator update with hinge loss on (real, fake) clip batches.
/// Returns (loss, accuracy) where accuracy scores clips by the sign of their
/// mean patch logit.
pub fn discriminator_step<E: Scalar>(
    disc: &mut Discriminator<E>,
    opt: &mut Adam,
    reals: &[Tensor<E>],
    fakes: &[Tensor<E>],
) -> Result<(f64, f64)> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::invalid("empty discriminator batch"));
    }
    let results: Vec<Result<(f64, bool, bool, Vec<(String, Tensor<E>)>)>> = {
        let d = &*disc;
        reals
            .par_iter()
            .zip(fakes.par_iter())
            .map(|(real, fake)| {
                if real.shape() != fake.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "discriminator_step",
                        lhs: real.shape().to_vec(),
                        rhs: fake.shape().to_vec(),
                    });
                }
                let bind = Binder::trainable();
                let lr = d.forward(&bind, &Var::constant(real.clone()))?;
                let lf = d.forward(&bind, &Var::constant(fake.clone()))?;
                // hinge: E[relu(1 - D(real))] + E[relu(1 + D(fake))]
                let loss_real = lr.neg().add_scalar(E::ONE).relu().mean();
                let loss_fake = lf.add_scalar(E::ONE).relu().mean();
                let loss = loss_real.add(&loss_fake)?;
                let real_ok = lr.value().mean().to_f64() > 0.0;
                let fake_ok = lf.value().mean().to_f64() <= 0.0;
                let value = loss.value().item().to_f64();
                loss.scale(E::from_f64(1.0 / reals.len() as f64)).backward()?;
                Ok((value, real_ok, fake_ok, bind.grads()))
            })
            .collect()
    };
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut per_worker = Vec::new();
    let n = results.len();
    for r in results {
        let (value, real_ok, fake_ok, grads) = r?;
        total += value / n as f64;
        correct += real_ok as usize + fake_ok as usize;
        per_worker.push(grads);
    }
    let grads = reduce_grads(per_worker);
    opt.apply(disc.params_mut(), &grads)?;
    Ok((total, correct as f64 / (2 * n) as f64))
}

/// Retrain a narrower decoder against the frozen encoder. Thin widths must
/// not exceed the base decoder's widths stage-by-stage.
pub fn thin_decoder_retrain<E: Scalar>(
    vae: &Vae<E>,
    thin_widths: &[usize],
    clips: &[Tensor<E>],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Decoder<E>> {
    let base_widths = &vae.decoder.widths;
    if thin_widths.len() != base_widths.len() {
        return Err(Error::invalid(format!(
            "thin widths {thin_widths:?} must match base arity {base_widths:?}"
        )));
    }
    for (i, (&t, &b)) in thin_widths.iter().zip(base_widths).enumerate() {
        if t > b {
            return Err(Error::invalid(format!(
                "thin width {t} exceeds base width {b} at stage {i}"
            )));
        }
    }
    let mut rng = Rng::derive(seed, &["thin_dec"]);
    let mut dec = Decoder::init_with_widths("vae.dec", &vae.cfg, thin_widths, &mut rng);
    // encoder outputs are fixed; pack latents once
    let latents: Vec<Tensor<E>> = clips
        .iter()
        .map(|c| vae.encode_mean(c))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(lr);
    let batch = 4usize.min(clips.len());
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|i| (step * batch + i) % clips.len()).collect();
        let results: Vec<Result<Vec<(String, Tensor<E>)>>> = {
            let dec_ref = &dec;
            idx.par_iter()
                .map(|&i| {
                    let bind = Binder::trainable();
                    let recon = dec_ref.forward(&bind, &Var::constant(latents[i].clone()))?;
                    let x = Var::constant(clips[i].clone());
                    let loss = l1(&recon, &x)?
                        .add(&gradient_difference(&recon, &x)?.scale(E::from_f64(0.1)))?;
                    if !loss.value().all_finite() {
                        return Err(Error::NonFinite("thin decoder loss"));
                    }
                    loss.scale(E::from_f64(1.0 / batch as f64)).backward()?;
                    Ok(bind.grads())
                })
                .collect()
        };
        let grads = reduce_grads(results.into_iter().collect::<Result<Vec<_>>>()?);
        opt.apply(dec.params_mut(), &grads)?;
    }
    Ok(dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    #[test]
    fn kl_zero_at_unit_gaussian_match() {
        let mean = Var::constant(Tensor::<f64>::zeros(&[2, 2, 2, 4]));
        let logvar = Var::constant(Tensor::<f64>::zeros(&[2, 2, 2, 4]));
        let kl = kl_divergence(&mean, &logvar).unwrap();
        assert_eq!(kl.value().item(), 0.0);
    }

    #[test]
    fn kl_nonnegative_on_random_posteriors() {
        let mut rng = Rng::seed_from(40);
        for _ in 0..50 {
            let mean = Var::constant(Tensor::<f64>::randn(&[3, 2, 2, 4], 2.0, &mut rng));
            let logvar = Var::constant(Tensor::<f64>::randn(&[3, 2, 2, 4], 1.5, &mut rng));
            let kl = kl_divergence(&mean, &logvar).unwrap();
            assert!(kl.value().item() >= 0.0);
        }
    }

    #[test]
    fn identical_reconstruction_gives_zero_l1() {
        let mut rng = Rng::seed_from(41);
        let x = Var::constant(Tensor::<f64>::rand_uniform(&[2, 4, 4, 3], 0.0, 1.0, &mut rng));
        assert_eq!(l1(&x, &x).unwrap().value().item(), 0.0);
        assert_eq!(gradient_difference(&x, &x).unwrap().value().item(), 0.0);
    }

    #[test]
    fn thin_decoder_width_contract() {
        let mut rng = Rng::seed_from(42);
        let vae = Vae::<f32>::init(&CodecConfig::desk(), &mut rng);
        // widths equal to base: allowed, cost ratio exactly 1
        let same = thin_decoder_retrain(&vae, &vae.decoder.widths.clone(), &[], 0, 1e-3, 7).unwrap();
        let shape = [3usize, 4, 4, 8];
        assert_eq!(
            vae.decoder.flops(&shape).unwrap(),
            same.flops(&shape).unwrap()
        );
        // widths exceeding base: rejected
        let too_wide: Vec<usize> = vae.decoder.widths.iter().map(|w| w + 1).collect();
        assert!(thin_decoder_retrain(&vae, &too_wide, &[], 0, 1e-3, 7).is_err());
    }

    #[test]
    fn thin_decoder_flop_ratio_on_named_widths() {
        // base (64,32,16) vs thin (64,16,8) on the desk ratio config
        let mut cfg = CodecConfig::desk();
        cfg.dec_widths = vec![64, 32, 16];
        let mut rng = Rng::seed_from(43);
        let vae = Vae::<f32>::init(&cfg, &mut rng);
        let thin = Decoder::<f32>::init_with_widths("vae.dec", &cfg, &[64, 16, 8], &mut rng);
        let shape = [3usize, 4, 4, 8];
        let ratio =
            vae.decoder.flops(&shape).unwrap() as f64 / thin.flops(&shape).unwrap() as f64;
        assert!(ratio >= 1.8, "cost ratio {ratio:.2}");
    }
}
