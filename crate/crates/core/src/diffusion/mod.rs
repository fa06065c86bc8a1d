//! Flow matching: linear interpolation between data and noise, velocity
//! targets, logit-normal timesteps with a resolution-aware shift, the Euler
//! sampler, training, progressive stages, and the cascaded refiner.

pub mod refiner;
pub mod sampler;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub use refiner::{refine, refiner_condition, refiner_from_base, refiner_train_step, upsample_latent};
pub use sampler::{euler_sample, shifted_grid, CondMode, SampleSpec};
pub use train::{run_stage_plan, train_step, StagePlan, StageReport, StageSpec, TrainContext, TrainSample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    pub logit_mean: f64,
    pub logit_std: f64,
    /// Resolution-aware shift scale, >= 1.
    pub shift_scale: f64,
    pub nfe_default: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            logit_mean: 0.0,
            logit_std: 1.0,
            shift_scale: 1.0,
            nfe_default: 32,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.logit_std <= 0.0 {
            return Err(Error::invalid("logit_std must be positive"));
        }
        if self.shift_scale < 1.0 {
            return Err(Error::invalid(format!(
                "shift_scale {} must be >= 1",
                self.shift_scale
            )));
        }
        Ok(())
    }
}

/// x_t = (1 - t) * x0 + t * eps.
pub fn interpolate<E: Scalar>(x0: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    x0.scale(E::from_f64(1.0 - t))
        .add(&eps.scale(E::from_f64(t)))
}

/// Velocity target v = eps - x0; satisfies x0 = x_t - t * v exactly.
pub fn velocity_target<E: Scalar>(x0: &Tensor<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    eps.sub(x0)
}

/// Logit-normal draw: sigmoid(m + s * z), z ~ N(0, 1). Always in (0, 1).
pub fn sample_timestep(cfg: &FlowConfig, rng: &mut Rng) -> f64 {
    let z = rng.normal();
    let x = cfg.logit_mean + cfg.logit_std * z;
    1.0 / (1.0 + (-x).exp())
}

/// Resolution-aware shift t' = k·t / (1 + (k-1)·t): a monotone bijection of
/// [0,1] with fixed endpoints that raises noise levels for k > 1, and obeys
/// shift(k1) ∘ shift(k2) = shift(k1·k2).
pub fn shift_timestep(t: f64, shift_scale: f64) -> Result<f64> {
    if shift_scale < 1.0 {
        return Err(Error::invalid(format!(
            "shift scale {shift_scale} must be >= 1"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(shift_scale * t / (1.0 + (shift_scale - 1.0) * t))
}

/// Shift scale for a token count relative to the base: sqrt(tokens / base).
pub fn shift_for_tokens(token_count: usize, base_token_count: usize) -> f64 {
    (token_count as f64 / base_token_count.max(1) as f64)
        .sqrt()
        .max(1.0)
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Logit-normal CDF at t for parameters (m, s).
pub fn logit_normal_cdf(t: f64, m: f64, s: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let logit = (t / (1.0 - t)).ln();
    normal_cdf((logit - m) / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints() {
        let mut rng = Rng::seed_from(90);
        let x0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap().data(), x0.data());
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap().data(), eps.data());
        let mid = interpolate(&Tensor::zeros(&[1]), &Tensor::full(&[1], 2.0), 0.5).unwrap();
        assert_eq!(mid.item(), 1.0);
        assert!(interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn velocity_identity_recovers_x0() {
        let mut rng = Rng::seed_from(91);
        let x0 = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let v = velocity_target(&x0, &eps).unwrap();
        for _ in 0..10 {
            let t = rng.uniform();
            let xt = interpolate(&x0, &eps, t).unwrap();
            let rec = xt.sub(&v.scale(t)).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(velocity_target(&x0, &x0).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn timestep_sampling_statistics() {
        let cfg = FlowConfig::default();
        let mut rng = Rng::seed_from(92);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_timestep(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[n / 2];
        assert!((median - 0.5).abs() < 0.02, "median {median}");
        // KS statistic against the analytic logit-normal CDF
        let mut ks = 0.0f64;
        for (i, &t) in draws.iter().enumerate() {
            let empirical = (i + 1) as f64 / n as f64;
            let analytic = logit_normal_cdf(t, 0.0, 1.0);
            ks = ks.max((empirical - analytic).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn shift_identity_and_endpoints() {
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert_eq!(shift_timestep(t, 1.0).unwrap(), t);
        }
        for k in [1.0, 2.0, 5.0] {
            assert_eq!(shift_timestep(0.0, k).unwrap(), 0.0);
            assert_eq!(shift_timestep(1.0, k).unwrap(), 1.0);
        }
        assert!((shift_timestep(0.5, 3.0).unwrap() - 0.75).abs() < 1e-12);
        assert!(shift_timestep(0.5, 0.5).is_err());
    }

    #[test]
    fn shift_monotone_bijection_and_composition() {
        let mut rng = Rng::seed_from(93);
        for _ in 0..50 {
            let k1 = 1.0 + rng.uniform() * 4.0;
            let k2 = 1.0 + rng.uniform() * 4.0;
            let mut prev = -1.0;
            for i in 0..=40 {
                let t = i as f64 / 40.0;
                let s = shift_timestep(t, k1).unwrap();
                assert!(s > prev, "not strictly increasing");
                assert!(s >= t - 1e-12, "shift must not lower noise for k >= 1");
                prev = s;
                let composed = shift_timestep(shift_timestep(t, k2).unwrap(), k1).unwrap();
                let direct = shift_timestep(t, k1 * k2).unwrap();
                assert!(
                    (composed - direct).abs() < 1e-9,
                    "composition law violated: {composed} vs {direct}"
                );
            }
        }
    }
}
