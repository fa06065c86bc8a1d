//! Trajectory-segmented consistency distillation: the denoising trajectory is
//! partitioned into segments on the shifted timestep grid; the student learns
//! to jump each segment in one step, matched against the teacher integrated
//! with small Euler steps, and an EMA copy of the student stabilizes the
//! exported weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::sampler::{euler_step, SampleSpec};
use crate::diffusion::{interpolate, shifted_grid, FlowConfig};
use crate::dit::{dit_forward, DiTModel, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{reduce_grads, Adam, Binder, P};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Segment plan over a discretized trajectory: K segments on a grid of
/// `grid_n` Euler steps; boundaries run 1 = b_0 > b_1 > ... > b_K = 0 in
/// time (grid indices descend from grid_n to 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub segments: usize,
    pub grid_n: usize,
    /// Grid indices of the boundaries, descending from grid_n to 0.
    pub boundary_indices: Vec<usize>,
}

/// Uniform partition of the shifted grid into K segments.
pub fn segment_boundaries(k: usize, grid_n: usize) -> Result<SegmentPlan> {
    if k == 0 {
        return Err(Error::invalid("segment count must be >= 1"));
    }
    if grid_n % k != 0 {
        return Err(Error::invalid(format!(
            "segment count {k} does not divide grid size {grid_n}"
        )));
    }
    let step = grid_n / k;
    let boundary_indices: Vec<usize> = (0..=k).map(|i| grid_n - i * step).collect();
    Ok(SegmentPlan {
        segments: k,
        grid_n,
        boundary_indices,
    })
}

impl SegmentPlan {
    /// Boundary timesteps on the shifted grid, descending 1 -> 0.
    pub fn boundary_times(&self, shift_scale: f64) -> Result<Vec<f64>> {
        let grid = shifted_grid(self.grid_n, shift_scale)?;
        Ok(self.boundary_indices.iter().map(|&i| grid[i]).collect())
    }
}

/// EMA-stabilized copy of the student, updated after every optimizer step
/// and used as the exported distilled network.
#[derive(Debug, Clone)]
pub struct EmaTracker<E: Scalar> {
    pub decay: f64,
    pub shadow: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> EmaTracker<E> {
    pub fn new(model: &DiTModel<E>, decay: f64) -> Self {
        EmaTracker {
            decay,
            shadow: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn update(&mut self, model: &DiTModel<E>) {
        for ((_, s), p) in self.shadow.iter_mut().zip(model.params()) {
            let d = E::from_f64(self.decay);
            let one_minus = E::from_f64(1.0 - self.decay);
            *s = s.scale(d).add(&p.value.scale(one_minus)).unwrap();
        }
    }

    pub fn apply_to(&self, model: &mut DiTModel<E>) {
        let map: std::collections::BTreeMap<&str, &Tensor<E>> = self
            .shadow
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for p in model.params_mut() {
            if let Some(t) = map.get(p.name.as_str()) {
                p.value = (*t).clone();
            }
        }
    }
}

/// The teacher's multi-step-vs-one-step gap on one state: MSE between the
/// teacher integrated with `substeps` Euler steps and its own single jump.
/// This is the student-at-init consistency loss, used as a baseline curve.
pub fn teacher_gap<E: Scalar>(
    teacher: &DiTModel<E>,
    seq: &TokenSequence,
    spec: &SampleSpec<E>,
    x: &Tensor<E>,
    eps_init: &Tensor<E>,
    t_hi: f64,
    t_lo: f64,
    substeps: usize,
) -> Result<f64> {
    let mut calls = 0usize;
    let target = integrate_teacher(teacher, seq, spec, x, eps_init, t_hi, t_lo, substeps, &mut calls)?;
    let one = euler_step(teacher, seq, spec, x, eps_init, t_hi, t_lo, &mut calls)?;
    let diff = target.sub(&one)?;
    Ok(diff.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / diff.numel() as f64)
}

#[allow(clippy::too_many_arguments)]
fn integrate_teacher<E: Scalar>(
    teacher: &DiTModel<E>,
    seq: &TokenSequence,
    spec: &SampleSpec<E>,
    x: &Tensor<E>,
    eps_init: &Tensor<E>,
    t_hi: f64,
    t_lo: f64,
    substeps: usize,
    calls: &mut usize,
) -> Result<Tensor<E>> {
    let mut cur = x.clone();
    for s in 0..substeps {
        let a = t_hi + (t_lo - t_hi) * s as f64 / substeps as f64;
        let b = t_hi + (t_lo - t_hi) * (s + 1) as f64 / substeps as f64;
        cur = euler_step(teacher, seq, spec, &cur, eps_init, a, b, calls)?;
    }
    Ok(cur)
}

/// Configuration for one distillation run.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub plan: SegmentPlan,
    pub flow: FlowConfig,
    pub teacher_substeps: usize,
    pub ema_decay: f64,
    pub lr: f64,
}

/// One TSCD step over a batch of (clean latent, sequence) pairs.
///
/// For each sample: draw a segment and a grid point strictly inside it,
/// renoise the clean latent to that time, integrate the teacher to the
/// segment's lower boundary (gradient-frozen), and regress the student's
/// single jump onto that target. The teacher is never touched; the EMA
/// tracker absorbs every student update.
pub fn tscd_step<E: Scalar>(
    student: &mut DiTModel<E>,
    teacher: &DiTModel<E>,
    ema: &mut EmaTracker<E>,
    opt: &mut Adam,
    cfg: &DistillConfig,
    batch: &[(Tensor<E>, TokenSequence)],
    seed: u64,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty distillation batch"));
    }
    let grid = shifted_grid(cfg.plan.grid_n, cfg.flow.shift_scale)?;
    let results: Vec<Result<(f64, Vec<(String, Tensor<E>)>)>> = {
        let st = &*student;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, (x0, seq))| {
                let mut rng = Rng::derive(seed, &["tscd", &step.to_string(), &i.to_string()]);
                // segment and a grid point strictly inside (lower, upper]
                let seg = rng.below(cfg.plan.segments);
                let hi_idx = cfg.plan.boundary_indices[seg];
                let lo_idx = cfg.plan.boundary_indices[seg + 1];
                let pick = lo_idx + 1 + rng.below(hi_idx - lo_idx);
                let (t_pick, t_lo) = (grid[pick], grid[lo_idx]);
                let eps = Tensor::<E>::randn(x0.shape(), 1.0, &mut rng);
                let xt = interpolate(x0, &eps, t_pick)?;
                let spec = SampleSpec::new(
                    crate::conditioning::TaskSpec::t2v(),
                    None,
                    x0.shape(),
                    0,
                );
                // teacher target, gradient-frozen
                let mut calls = 0usize;
                let target = integrate_teacher(
                    teacher,
                    seq,
                    &spec,
                    &xt,
                    &eps,
                    t_pick,
                    t_lo,
                    cfg.teacher_substeps,
                    &mut calls,
                )?;
                // student single jump, differentiable
                let cond = crate::conditioning::assemble_condition(
                    &xt,
                    &Tensor::zeros(x0.shape()),
                    &crate::conditioning::TaskSpec::t2v(),
                )?;
                let bind = Binder::trainable();
                let v = dit_forward(
                    st,
                    &bind,
                    &crate::autodiff::Var::constant(cond),
                    seq,
                    t_pick,
                    None,
                )?;
                let jump = crate::autodiff::Var::constant(xt.clone())
                    .sub(&v.scale(E::from_f64(t_pick - t_lo)))?;
                let loss = crate::autodiff::mse(&jump, &crate::autodiff::Var::constant(target))?;
                let value = loss.value().item().to_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite("tscd loss"));
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
    opt.apply(student.params_mut(), &grads)?;
    ema.update(student);
    Ok(total)
}

/// Sample with one student jump per segment: NFE = K. With K = grid_n this
/// reproduces the Euler sampler bit-exactly (same grid, same step form).
pub fn few_step_sample<E: Scalar>(
    student: &DiTModel<E>,
    seq: &TokenSequence,
    spec: &SampleSpec<E>,
    plan: &SegmentPlan,
    flow: &FlowConfig,
) -> Result<(Tensor<E>, usize)> {
    let times = plan.boundary_times(flow.shift_scale)?;
    let mut rng = Rng::derive(spec.seed, &["sample", "init"]);
    let eps_init = Tensor::<E>::randn(&spec.latent_shape, 1.0, &mut rng);
    let mut x = eps_init.clone();
    let mut calls = 0usize;
    for w in times.windows(2) {
        x = euler_step(student, seq, spec, &x, &eps_init, w[0], w[1], &mut calls)?;
    }
    if calls != plan.segments {
        return Err(Error::invalid(format!(
            "few-step sampling made {calls} calls for a {}-segment plan",
            plan.segments
        )));
    }
    Ok((x, calls))
}

/// Verify a (student, plan) pairing before sampling.
pub fn check_plan(plan: &SegmentPlan, k: usize) -> Result<()> {
    if plan.segments != k {
        return Err(Error::invalid(format!(
            "requested {k} steps but the student was distilled with a {}-segment plan",
            plan.segments
        )));
    }
    Ok(())
}

pub use crate::diffusion::sampler::CondMode;

/// Parameter hash for freeze checks.
pub fn param_fingerprint<E: Scalar>(params: &[&P<E>]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for p in params {
        for b in p.name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
        }
        for v in p.value.data() {
            let bits = v.to_f64().to_bits();
            h = (h ^ bits).wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{single_shot_sequence, TaskSpec};
    use crate::dit::DiTConfig;

    #[test]
    fn whole_trajectory_plan() {
        let plan = segment_boundaries(1, 8).unwrap();
        assert_eq!(plan.boundary_indices, vec![8, 0]);
        let times = plan.boundary_times(1.0).unwrap();
        assert_eq!(times, vec![1.0, 0.0]);
    }

    #[test]
    fn uniform_partition_on_grid_32() {
        let plan = segment_boundaries(4, 32).unwrap();
        assert_eq!(plan.boundary_indices, vec![32, 24, 16, 8, 0]);
    }

    #[test]
    fn boundaries_strictly_decreasing_random_plans() {
        let mut rng = Rng::seed_from(320);
        for _ in 0..50 {
            let k = 1 + rng.below(8);
            let grid = k * (1 + rng.below(10));
            let plan = segment_boundaries(k, grid).unwrap();
            let times = plan.boundary_times(1.0 + rng.uniform() * 3.0).unwrap();
            assert_eq!(times[0], 1.0);
            assert_eq!(*times.last().unwrap(), 0.0);
            for w in times.windows(2) {
                assert!(w[0] > w[1], "boundaries not strictly decreasing: {times:?}");
            }
        }
    }

    #[test]
    fn non_divisible_plan_rejected() {
        assert!(segment_boundaries(3, 32).is_err());
        assert!(segment_boundaries(0, 32).is_err());
    }

    fn tiny_model(seed: u64) -> DiTModel<f32> {
        let cfg = DiTConfig {
            d_model: 24,
            n_heads: 2,
            n_spatial_layers: 1,
            n_temporal_layers: 1,
            window_h: 2,
            window_w: 2,
            rope_base: 100.0,
            in_channels: 9,
            out_channels: 4,
            vocab_size: 40,
            mlp_ratio: 2,
            max_text_tokens: 16,
        };
        DiTModel::init(&cfg, &mut Rng::seed_from(seed)).unwrap()
    }

    #[test]
    fn exact_linear_field_gives_zero_loss_at_init() {
        // zero-init head predicts v = 0 everywhere: teacher substeps and the
        // one-jump student agree exactly, so the consistency loss is 0
        let teacher = tiny_model(321);
        let mut student = teacher.clone();
        let mut ema = EmaTracker::new(&student, 0.99);
        let mut opt = Adam::new(0.0);
        let cfg = DistillConfig {
            plan: segment_boundaries(2, 8).unwrap(),
            flow: FlowConfig::default(),
            teacher_substeps: 4,
            ema_decay: 0.99,
            lr: 0.0,
        };
        let shape = [2usize, 2, 2, 4];
        let seq = single_shot_sequence("a red circle", &shape, 16).unwrap();
        let mut rng = Rng::seed_from(322);
        let x0 = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let loss = tscd_step(
            &mut student,
            &teacher,
            &mut ema,
            &mut opt,
            &cfg,
            &[(x0, seq)],
            1,
            0,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn teacher_parameters_never_change() {
        let teacher = tiny_model(323);
        let before = param_fingerprint(&teacher.params());
        let mut student = teacher.clone();
        let mut ema = EmaTracker::new(&student, 0.99);
        let mut opt = Adam::new(1e-3);
        let cfg = DistillConfig {
            plan: segment_boundaries(2, 8).unwrap(),
            flow: FlowConfig::default(),
            teacher_substeps: 2,
            ema_decay: 0.99,
            lr: 1e-3,
        };
        let shape = [2usize, 2, 2, 4];
        let mut rng = Rng::seed_from(324);
        for step in 0..3 {
            let seq = single_shot_sequence("a blue square moves left", &shape, 16).unwrap();
            let x0 = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
            tscd_step(
                &mut student,
                &teacher,
                &mut ema,
                &mut opt,
                &cfg,
                &[(x0, seq)],
                2,
                step,
            )
            .unwrap();
        }
        assert_eq!(param_fingerprint(&teacher.params()), before);
    }

    #[test]
    fn degenerate_plan_reproduces_euler_sampler_bit_exactly() {
        let model = tiny_model(325);
        let shape = [2usize, 2, 2, 4];
        let seq = single_shot_sequence("a cyan triangle", &shape, 16).unwrap();
        let spec = SampleSpec::new(TaskSpec::t2v(), None, &shape, 55);
        let flow = FlowConfig {
            shift_scale: 1.7,
            ..FlowConfig::default()
        };
        let plan = segment_boundaries(16, 16).unwrap();
        let (a, n_few) = few_step_sample(&model, &seq, &spec, &plan, &flow).unwrap();
        let (b, n_euler) = crate::diffusion::euler_sample(&model, &seq, &spec, &flow, 16).unwrap();
        assert_eq!(n_few, 16);
        assert_eq!(n_euler, 16);
        assert_eq!(a.data(), b.data(), "degenerate plan must match the sampler bit-exactly");
    }

    #[test]
    fn plan_mismatch_rejected() {
        let plan = segment_boundaries(4, 32).unwrap();
        assert!(check_plan(&plan, 4).is_ok());
        assert!(check_plan(&plan, 8).is_err());
    }
}
