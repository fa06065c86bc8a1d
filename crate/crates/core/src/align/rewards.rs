//! Reward models: three fixed toy scorers mirroring the foundational /
//! motion / aesthetic split, auxiliary test rewards, and a small trainable
//! scorer network for preference learning. All scorers are differentiable
//! through the decoded video.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, P};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Prompt-side context a scorer may need.
#[derive(Debug, Clone, Copy)]
pub struct RewardCtx {
    pub target_color: [f64; 3],
    pub background: [f64; 3],
}

impl Default for RewardCtx {
    fn default() -> Self {
        RewardCtx {
            target_color: [1.0, 0.0, 0.0],
            background: [0.02, 0.02, 0.02],
        }
    }
}

#[derive(Debug, Clone)]
pub enum FixedReward {
    /// Caption-attribute match: negative squared distance between the
    /// foreground mean color and the prompt's color.
    ColorMatch,
    /// Motion amplitude band-pass: zero penalty inside [lo, hi] mean
    /// inter-frame difference, quadratic outside (static content scores low).
    MotionBand { lo: f64, hi: f64 },
    /// Keyframe contrast plus saturation; consumes frame 0 only.
    KeyframeAesthetic,
    /// Negative squared distance of mean brightness to a target.
    BrightnessTarget { target: f64 },
    /// Mean absolute spatial gradient.
    Sharpness,
}

/// Trainable scorer: pooled appearance and motion features through a small
/// MLP.
#[derive(Debug, Clone)]
pub struct ScorerNet<E: Scalar> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pool: usize,
}

impl<E: Scalar> ScorerNet<E> {
    pub fn init(name: &str, rng: &mut Rng) -> Self {
        let pool = 4usize;
        let feat = 2 * pool * pool * 3;
        ScorerNet {
            fc1: Linear::init(&format!("{name}.fc1"), feat, 32, 0.1, rng),
            fc2: Linear::init(&format!("{name}.fc2"), 32, 1, 0.1, rng),
            pool,
        }
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }

    /// Features: average-pooled mean frame plus average-pooled mean absolute
    /// frame difference, flattened.
    fn features(&self, video: &Var<E>) -> Result<Var<E>> {
        let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
        let appearance = pool_hw(&video.mean_frames()?, self.pool)?;
        let motion = if t > 1 {
            let a = video.slice(0, 1, t - 1)?;
            let b = video.slice(0, 0, t - 1)?;
            pool_hw(&a.sub(&b)?.abs().mean_frames()?, self.pool)?
        } else {
            Var::constant(Tensor::zeros(&[self.pool * self.pool * 3]))
        };
        let _ = (h, w);
        Var::concat(&[appearance, motion], 0)
    }

    pub fn score(&self, bind: &Binder<E>, video: &Var<E>) -> Result<Var<E>> {
        let feats = self.features(video)?;
        let n = feats.shape()[0];
        let x = feats.reshape(&[1, n])?;
        let h = self.fc1.forward(bind, &x)?.silu();
        Ok(self.fc2.forward(bind, &h)?.reshape(&[1])?.mean())
    }
}

/// Mean over the frame axis of a (T, H, W, C) Var -> (H, W, C).
trait FrameOps<E: Scalar> {
    fn mean_frames(&self) -> Result<Var<E>>;
}

impl<E: Scalar> FrameOps<E> for Var<E> {
    fn mean_frames(&self) -> Result<Var<E>> {
        let t = self.shape()[0];
        Ok(self.sum_axis(0)?.scale(E::from_f64(1.0 / t as f64)))
    }
}

/// Average-pool (H, W, C) down to (p, p, C) and flatten. H and W must be
/// multiples of p.
fn pool_hw<E: Scalar>(x: &Var<E>, p: usize) -> Result<Var<E>> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "pool: {h}x{w} not divisible by {p}"
        )));
    }
    let (bh, bw) = (h / p, w / p);
    let grouped = x.reshape(&[p, bh, p, bw, c])?;
    let pooled = grouped
        .sum_axis(3)?
        .sum_axis(1)?
        .scale(E::from_f64(1.0 / (bh * bw) as f64));
    pooled.reshape(&[p * p * c])
}

#[derive(Debug, Clone)]
pub enum Scorer<E: Scalar> {
    Fixed(FixedReward),
    Learned(ScorerNet<E>),
}

#[derive(Debug, Clone)]
pub struct RewardModel<E: Scalar> {
    pub name: String,
    pub scorer: Scorer<E>,
}

impl<E: Scalar> RewardModel<E> {
    pub fn fixed(name: &str, reward: FixedReward) -> Self {
        RewardModel {
            name: name.into(),
            scorer: Scorer::Fixed(reward),
        }
    }

    pub fn learned(name: &str, rng: &mut Rng) -> Self {
        RewardModel {
            name: name.into(),
            scorer: Scorer::Learned(ScorerNet::init(name, rng)),
        }
    }

    /// The standard toy triplet.
    pub fn toy_suite() -> Vec<RewardModel<E>> {
        vec![
            RewardModel::fixed("foundational", FixedReward::ColorMatch),
            RewardModel::fixed(
                "motion",
                FixedReward::MotionBand {
                    lo: 0.004,
                    hi: 0.05,
                },
            ),
            RewardModel::fixed("aesthetic", FixedReward::KeyframeAesthetic),
        ]
    }

    pub fn trainable(&self) -> bool {
        matches!(self.scorer, Scorer::Learned(_))
    }

    pub fn params(&self) -> Vec<&P<E>> {
        match &self.scorer {
            Scorer::Fixed(_) => vec![],
            Scorer::Learned(net) => net.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        match &mut self.scorer {
            Scorer::Fixed(_) => vec![],
            Scorer::Learned(net) => net.params_mut(),
        }
    }

    /// Score a decoded video (T, H, W, 3) in [0, 1]-ish space. The returned
    /// Var is differentiable through the video; learned parameters follow
    /// the binder's trainability.
    pub fn score(&self, bind: &Binder<E>, video: &Var<E>, ctx: &RewardCtx) -> Result<Var<E>> {
        if video.shape().len() != 4 || video.shape()[3] != 3 {
            return Err(Error::invalid(format!(
                "reward expects (T,H,W,3) video, got {:?}",
                video.shape()
            )));
        }
        match &self.scorer {
            Scorer::Learned(net) => net.score(bind, video),
            Scorer::Fixed(kind) => score_fixed(kind, video, ctx),
        }
    }
}

fn score_fixed<E: Scalar>(
    kind: &FixedReward,
    video: &Var<E>,
    ctx: &RewardCtx,
) -> Result<Var<E>> {
    match kind {
        FixedReward::ColorMatch => {
            // binary foreground mask from the current frame values, treated
            // as a constant so the gradient only moves pixel colors
            let v = video.value();
            let n_px = v.numel() / 3;
            let mut weights = vec![E::ZERO; v.numel()];
            let mut total = 0.0f64;
            for px in 0..n_px {
                let mut dist = 0.0;
                for c in 0..3 {
                    dist += (v.data()[px * 3 + c].to_f64() - ctx.background[c]).abs();
                }
                if dist > 0.45 {
                    for c in 0..3 {
                        weights[px * 3 + c] = E::ONE;
                    }
                    total += 3.0;
                }
            }
            if total < 1.0 {
                // nothing resembling a foreground: strongly negative reward,
                // gradient pulls every pixel toward the target color
                total = v.numel() as f64;
                weights = vec![E::ONE; v.numel()];
            }
            let mut target = vec![E::ZERO; v.numel()];
            for px in 0..n_px {
                for c in 0..3 {
                    target[px * 3 + c] = E::from_f64(ctx.target_color[c]);
                }
            }
            let w = Var::constant(Tensor::from_vec(v.shape(), weights)?);
            let t = Var::constant(Tensor::from_vec(v.shape(), target)?);
            let sq = video.sub(&t)?.sqr().mul(&w)?;
            Ok(sq.sum().scale(E::from_f64(-1.0 / total)))
        }
        FixedReward::MotionBand { lo, hi } => {
            let t = video.shape()[0];
            if t < 2 {
                return Ok(Var::constant(Tensor::scalar(E::from_f64(-(lo * lo)))));
            }
            let a = video.slice(0, 1, t - 1)?;
            let b = video.slice(0, 0, t - 1)?;
            let m = a.sub(&b)?.abs().mean();
            let under = m.neg().add_scalar(E::from_f64(*lo)).relu().sqr();
            let over = m.add_scalar(E::from_f64(-*hi)).relu().sqr();
            Ok(under.add(&over)?.scale(E::from_f64(-400.0)))
        }
        FixedReward::KeyframeAesthetic => {
            let key = video.slice(0, 0, 1)?;
            let mu = key.mean();
            let n = key.value().numel();
            let centered = key.sub(&mu_broadcast(&mu, key.shape())?)?;
            let contrast = centered.sqr().mean().add_scalar(E::from_f64(1e-8)).sqrt();
            // saturation: mean abs deviation from the per-pixel gray level
            let (t, h, w) = (1usize, key.shape()[1], key.shape()[2]);
            let px = key.reshape(&[t * h * w, 3])?;
            let gray = px
                .sum_axis(1)?
                .scale(E::from_f64(1.0 / 3.0))
                .reshape(&[t * h * w, 1])?;
            let gray3 = Var::concat(&[gray.clone(), gray.clone(), gray], 1)?;
            let sat = px.sub(&gray3)?.abs().mean();
            let _ = n;
            contrast.add(&sat)
        }
        FixedReward::BrightnessTarget { target } => {
            let m = video.mean();
            Ok(m.add_scalar(E::from_f64(-*target)).sqr().neg())
        }
        FixedReward::Sharpness => {
            let h = video.shape()[1];
            let w = video.shape()[2];
            let gx = video.slice(1, 1, h - 1)?.sub(&video.slice(1, 0, h - 1)?)?;
            let gy = video.slice(2, 1, w - 1)?.sub(&video.slice(2, 0, w - 1)?)?;
            gx.abs().mean().add(&gy.abs().mean())
        }
    }
}

fn mu_broadcast<E: Scalar>(mu: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
    let n: usize = shape.iter().product();
    mu.reshape(&[1, 1])?.broadcast_rows(n)?.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::synth_clip;
    use crate::datagen::scene::*;

    fn clip(color: [f64; 3], vx: f64) -> Tensor<f32> {
        let spec = SceneSpec::single(ShotSpec {
            shapes: vec![(
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color,
                    size: 3.0,
                    start: (8.0, 8.0),
                },
                Motion {
                    kind: MotionKind::Translate,
                    velocity: (vx, 0.0),
                },
            )],
            camera: Camera::Static,
            background: BACKGROUNDS[0].1,
            frames: 5,
        });
        synth_clip(&spec, 16, 3).unwrap()
    }

    #[test]
    fn color_match_prefers_correct_color() {
        let rm = RewardModel::<f32>::fixed("foundational", FixedReward::ColorMatch);
        let ctx = RewardCtx {
            target_color: PALETTE[0].1,
            background: BACKGROUNDS[0].1,
        };
        let bind = Binder::frozen();
        let red = rm
            .score(&bind, &Var::constant(clip(PALETTE[0].1, 0.5)), &ctx)
            .unwrap();
        let blue = rm
            .score(&bind, &Var::constant(clip(PALETTE[2].1, 0.5)), &ctx)
            .unwrap();
        assert!(red.value().item() > blue.value().item());
    }

    #[test]
    fn motion_band_penalizes_static_content() {
        let rm = RewardModel::<f32>::fixed(
            "motion",
            FixedReward::MotionBand {
                lo: 0.004,
                hi: 0.05,
            },
        );
        let ctx = RewardCtx::default();
        let bind = Binder::frozen();
        let moving = rm
            .score(&bind, &Var::constant(clip(PALETTE[0].1, 1.0)), &ctx)
            .unwrap();
        let still = rm
            .score(&bind, &Var::constant(clip(PALETTE[0].1, 0.0)), &ctx)
            .unwrap();
        assert!(moving.value().item() > still.value().item());
    }

    #[test]
    fn aesthetic_uses_keyframe_only() {
        let rm = RewardModel::<f32>::fixed("aesthetic", FixedReward::KeyframeAesthetic);
        let ctx = RewardCtx::default();
        let bind = Binder::frozen();
        let a = clip(PALETTE[3].1, 1.0);
        // perturb only frames 1.. ; keyframe score must not change
        let mut b = a.clone();
        let frame = 16 * 16 * 3;
        for v in &mut b.data_mut()[frame..] {
            *v = 1.0 - *v;
        }
        let sa = rm.score(&bind, &Var::constant(a), &ctx).unwrap();
        let sb = rm.score(&bind, &Var::constant(b), &ctx).unwrap();
        assert_eq!(sa.value().item(), sb.value().item());
    }

    #[test]
    fn rewards_are_differentiable_through_video() {
        let ctx = RewardCtx::default();
        for (name, kind) in [
            ("color", FixedReward::ColorMatch),
            (
                "motion",
                FixedReward::MotionBand {
                    lo: 0.004,
                    hi: 0.05,
                },
            ),
            ("aesthetic", FixedReward::KeyframeAesthetic),
            ("brightness", FixedReward::BrightnessTarget { target: 0.5 }),
            ("sharp", FixedReward::Sharpness),
        ] {
            let rm = RewardModel::<f64>::fixed(name, kind);
            // keep inter-frame differences away from the |.| kink so central
            // differences stay on one side of it
            let mut rng = Rng::derive(330, &[name]);
            let base = Tensor::<f64>::rand_uniform(&[1, 8, 8, 3], 0.1, 0.7, &mut rng);
            let frames: Vec<Tensor<f64>> = (0..3)
                .map(|f| {
                    let jitter = Tensor::<f64>::rand_uniform(&[1, 8, 8, 3], -0.008, 0.008, &mut rng);
                    base.add_scalar(0.12 * f as f64).add(&jitter).unwrap()
                })
                .collect();
            let x = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 0).unwrap();
            // combined absolute + relative check: coordinates whose true
            // gradient is exactly zero see ~1e-10 float noise in the central
            // difference, which a pure relative ratio would inflate
            let f = |v: &Var<f64>| rm.score(&Binder::frozen(), v, &ctx);
            let leaf = Var::param(x.clone());
            let y = f(&leaf).unwrap();
            y.backward().unwrap();
            let g = leaf.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for i in 0..x.numel() {
                let eval = |delta: f64| {
                    let mut v = x.to_vec();
                    v[i] += delta;
                    f(&Var::constant(Tensor::from_vec(x.shape(), v).unwrap()))
                        .unwrap()
                        .value()
                        .item()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let a = g.data()[i];
                let abs_err = (a - fd).abs();
                let rel = abs_err / (a.abs() + fd.abs() + 1e-12);
                assert!(
                    abs_err < 1e-7 || rel < 1e-3,
                    "{name}[{i}]: analytic {a:.3e} vs fd {fd:.3e}"
                );
            }
        }
    }
}
