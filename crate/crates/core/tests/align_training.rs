//! Reward-maximization training curves at tiny scale: the brightness-target
//! oracle run, the refiner sharpness run, and the frozen-reward contract.

use vidflow_core::align::{
    refiner_rlhf_step, reward_feedback_step, EvalPrompt, FixedReward, RewardCtx, RewardModel,
    RlhfConfig,
};
use vidflow_core::codec::{CodecConfig, Vae};
use vidflow_core::diffusion::{refiner_from_base, FlowConfig};
use vidflow_core::distill::param_fingerprint;
use vidflow_core::dit::{DiTConfig, DiTModel};
use vidflow_core::nn::Adam;
use vidflow_core::rng::Rng;
use vidflow_core::tensor::Tensor;

fn tiny_models(seed: u64) -> (DiTModel<f32>, Vae<f32>) {
    let cfg = DiTConfig {
        d_model: 24,
        n_heads: 2,
        n_spatial_layers: 1,
        n_temporal_layers: 1,
        window_h: 2,
        window_w: 2,
        rope_base: 100.0,
        in_channels: 17,
        out_channels: 8,
        vocab_size: 40,
        mlp_ratio: 2,
        max_text_tokens: 16,
    };
    let mut rng = Rng::seed_from(seed);
    let codec = CodecConfig {
        enc_widths: vec![8, 12, 12],
        dec_widths: vec![12, 8],
        ..CodecConfig::desk()
    };
    (
        DiTModel::init(&cfg, &mut rng).unwrap(),
        Vae::init(&codec, &mut rng),
    )
}

fn prompts(n: usize) -> Vec<EvalPrompt> {
    (0..n)
        .map(|i| EvalPrompt {
            caption: "a red circle on a black background, it moves right".into(),
            ctx: RewardCtx::default(),
            latent_shape: vec![2, 2, 2, 8],
            seed: 9000 + i as u64,
        })
        .collect()
}

fn rlhf_cfg(weights: Vec<f64>) -> RlhfConfig {
    RlhfConfig {
        flow: FlowConfig::default(),
        t_lo: 0.3,
        t_hi: 0.9,
        prefix_steps: 2,
        weights,
        latent_scale: 1.0,
        max_text_tokens: 16,
    }
}

/// Brightness-target reward over 300 steps must close at least half the gap
/// to its maximum (zero), with the reward model untouched throughout.
#[test]
fn brightness_reward_closes_half_the_gap() {
    let (mut model, vae) = tiny_models(800);
    let rms = vec![RewardModel::fixed(
        "brightness",
        FixedReward::BrightnessTarget { target: 0.8 },
    )];
    let cfg = rlhf_cfg(vec![1.0]);
    let mut opt = Adam::new(2e-3);
    let eval_prompts = prompts(16);
    let batch = prompts(4);
    let hash_before = param_fingerprint(&rms.iter().flat_map(|r| r.params()).collect::<Vec<_>>());
    let mut first = None;
    let mut last = 0.0;
    for step in 0..300u64 {
        let report =
            reward_feedback_step(&mut model, &vae, &mut opt, &rms, &batch, &cfg, 801, step)
                .unwrap();
        assert!(!report.skipped);
        if first.is_none() {
            first = Some(report.composite);
        }
        last = report.composite;
    }
    let first = first.unwrap();
    let hash_after = param_fingerprint(&rms.iter().flat_map(|r| r.params()).collect::<Vec<_>>());
    assert_eq!(hash_before, hash_after, "reward model changed");
    // maximum of -(mean - target)^2 is 0
    let gap = -first;
    assert!(
        last >= first + 0.5 * gap,
        "reward moved {first:.4} -> {last:.4}, needed at least half of the {gap:.4} gap"
    );
    let _ = eval_prompts;
}

/// A single round is exactly one reward-model refresh plus one policy phase.
#[test]
fn multi_round_with_one_round_is_single_phase() {
    let (mut model, vae) = tiny_models(820);
    let label_rms = vec![RewardModel::fixed(
        "brightness",
        FixedReward::BrightnessTarget { target: 0.8 },
    )];
    let mut learned = vec![RewardModel::learned("rm.t", &mut Rng::seed_from(821))];
    let cfg = rlhf_cfg(vec![1.0]);
    let reports = vidflow_core::align::multi_round(
        &mut model,
        &vae,
        &mut learned,
        &label_rms,
        &[1.0],
        &prompts(3),
        &cfg,
        1,
        10,
        2,
        1e-3,
        822,
    )
    .unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].round, 0);
    assert!(reports[0].eval_composite.is_finite());
    assert!(vidflow_core::align::multi_round(
        &mut model,
        &vae,
        &mut learned,
        &label_rms,
        &[1.0],
        &prompts(3),
        &cfg,
        0,
        1,
        1,
        1e-3,
        823,
    )
    .is_err());
}

/// Refiner alignment: sharpness reward increases over 200 steps with the
/// low-resolution conditioning held fixed.
#[test]
fn refiner_sharpness_reward_increases() {
    let (base, vae) = tiny_models(810);
    let mut refiner = refiner_from_base(&base).unwrap();
    let rms = vec![RewardModel::fixed("sharp", FixedReward::Sharpness)];
    let cfg = rlhf_cfg(vec![1.0]);
    let mut opt = Adam::new(2e-3);
    let mut rng = Rng::seed_from(811);
    let lr_latents: Vec<(EvalPrompt, Tensor<f32>)> = prompts(4)
        .into_iter()
        .map(|p| {
            let lr = Tensor::<f32>::randn(&[2, 1, 1, 8], 1.0, &mut rng);
            (p, lr)
        })
        .collect();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..200u64 {
        let report = refiner_rlhf_step(
            &mut refiner,
            &vae,
            &mut opt,
            &rms,
            &lr_latents,
            &cfg,
            2,
            812,
            step,
        )
        .unwrap();
        if first.is_none() {
            first = Some(report.composite);
        }
        last = report.composite;
    }
    assert!(
        last > first.unwrap(),
        "sharpness did not increase: {first:?} -> {last}"
    );
}
