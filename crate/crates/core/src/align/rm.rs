//! Preference-pair reward-model training with the pairwise Bradley-Terry
//! objective.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Adam, Binder};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::rewards::{RewardCtx, RewardModel};

#[derive(Debug, Clone)]
pub struct PreferencePair<E: Scalar> {
    pub prompt: String,
    pub ctx: RewardCtx,
    pub video_best: Tensor<E>,
    pub video_worst: Tensor<E>,
    pub dimension: String,
}

impl<E: Scalar> PreferencePair<E> {
    pub fn validate(&self) -> Result<()> {
        if self.video_best.shape() == self.video_worst.shape()
            && self
                .video_best
                .data()
                .iter()
                .zip(self.video_worst.data())
                .all(|(a, b)| a == b)
        {
            return Err(Error::invalid("preference pair with identical videos"));
        }
        Ok(())
    }
}

/// Numerically stable softplus(-d) = -log sigmoid(d).
fn bt_loss<E: Scalar>(diff: &Var<E>) -> Result<Var<E>> {
    let neg = diff.neg();
    let stable = neg.relu().add(
        &neg.abs()
            .neg()
            .exp()
            .add_scalar(E::ONE)
            .ln(),
    )?;
    Ok(stable)
}

/// One optimizer step on -log sigmoid(score(best) - score(worst)).
/// Returns the loss value.
pub fn rm_train_step<E: Scalar>(
    rm: &mut RewardModel<E>,
    opt: &mut Adam,
    pair: &PreferencePair<E>,
) -> Result<f64> {
    if !rm.trainable() {
        return Err(Error::invalid(format!(
            "reward model {} has no trainable parameters",
            rm.name
        )));
    }
    pair.validate()?;
    let bind = Binder::trainable();
    let s_best = rm.score(&bind, &Var::constant(pair.video_best.clone()), &pair.ctx)?;
    let s_worst = rm.score(&bind, &Var::constant(pair.video_worst.clone()), &pair.ctx)?;
    let loss = bt_loss(&s_best.sub(&s_worst)?)?;
    let value = loss.value().item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("reward model loss"));
    }
    loss.backward()?;
    let grads: std::collections::BTreeMap<String, Tensor<E>> = bind.grads().into_iter().collect();
    opt.apply(rm.params_mut(), &grads)?;
    Ok(value)
}

/// Pair accuracy of a reward model on held-out pairs.
pub fn rm_accuracy<E: Scalar>(rm: &RewardModel<E>, pairs: &[PreferencePair<E>]) -> Result<f64> {
    let bind = Binder::frozen();
    let mut correct = 0usize;
    for p in pairs {
        let sb = rm
            .score(&bind, &Var::constant(p.video_best.clone()), &p.ctx)?
            .value()
            .item()
            .to_f64();
        let sw = rm
            .score(&bind, &Var::constant(p.video_worst.clone()), &p.ctx)?
            .value()
            .item()
            .to_f64();
        if sb > sw {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// Synthetic preference corpus with a planted margin: best = clips with
/// strong motion, worst = near-static versions of the same content.
pub fn planted_pairs<E: Scalar>(n: usize, seed: u64) -> Vec<PreferencePair<E>> {
    use crate::datagen::render::synth_clip;
    use crate::datagen::scene::*;
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, &["pair", &i.to_string()]);
            let color = PALETTE[i % PALETTE.len()].1;
            let speed = 0.8 + rng.uniform() * 0.3;
            let mk = |v: f64, seed: u64| {
                let spec = SceneSpec::single(ShotSpec {
                    shapes: vec![(
                        ShapeSpec {
                            kind: ShapeKind::Circle,
                            color,
                            size: 3.0,
                            start: (5.5, 8.0),
                        },
                        Motion {
                            kind: MotionKind::Translate,
                            velocity: (v, 0.0),
                        },
                    )],
                    camera: Camera::Static,
                    background: BACKGROUNDS[0].1,
                    frames: 5,
                });
                synth_clip(&spec, 16, seed).unwrap()
            };
            let best = mk(speed, seed ^ (2 * i as u64));
            let worst = mk(0.0, seed ^ (2 * i as u64 + 1));
            PreferencePair {
                prompt: format!("pair {i}"),
                ctx: RewardCtx {
                    target_color: color,
                    background: BACKGROUNDS[0].1,
                },
                video_best: best.cast::<E>(),
                video_worst: worst.cast::<E>(),
                dimension: "motion".into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_ln2() {
        let d = Var::constant(Tensor::<f64>::scalar(0.0));
        let loss = bt_loss(&d).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let d = Var::constant(Tensor::<f64>::scalar(50.0));
        let loss = bt_loss(&d).unwrap();
        assert!(loss.value().item() < 1e-12);
        let d = Var::constant(Tensor::<f64>::scalar(500.0));
        assert!(bt_loss(&d).unwrap().value().item().is_finite());
    }

    #[test]
    fn identical_videos_rejected() {
        let v = Tensor::<f32>::full(&[2, 4, 4, 3], 0.5);
        let pair = PreferencePair {
            prompt: "p".into(),
            ctx: RewardCtx::default(),
            video_best: v.clone(),
            video_worst: v,
            dimension: "any".into(),
        };
        let mut rm = RewardModel::learned("rm", &mut Rng::seed_from(1));
        let mut opt = Adam::new(1e-3);
        assert!(rm_train_step::<f32>(&mut rm, &mut opt, &pair).is_err());
    }

    #[test]
    fn fixed_rm_is_not_trainable() {
        let mut rm = RewardModel::<f32>::fixed(
            "motion",
            super::super::rewards::FixedReward::Sharpness,
        );
        let pairs = planted_pairs::<f32>(1, 9);
        let mut opt = Adam::new(1e-3);
        assert!(rm_train_step(&mut rm, &mut opt, &pairs[0]).is_err());
    }

    #[test]
    fn learns_planted_margin_above_90_percent() {
        let mut rm = RewardModel::<f32>::learned("rm", &mut Rng::seed_from(333));
        let mut opt = Adam::new(3e-3);
        let train = planted_pairs::<f32>(256, 40);
        let held = planted_pairs::<f32>(64, 41);
        for step in 0..200 {
            let pair = &train[step % train.len()];
            rm_train_step(&mut rm, &mut opt, pair).unwrap();
        }
        let acc = rm_accuracy(&rm, &held).unwrap();
        assert!(acc > 0.9, "held-out pair accuracy {acc}");
    }
}
