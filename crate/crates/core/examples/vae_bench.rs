//! Scratch benchmark for codec convergence tuning.
//! cargo run -p vidflow-core --example vae_bench --release -- <steps> <lr> <batch>

use std::time::Instant;

use vidflow_core::codec::{codec_train_step, psnr, CodecConfig, Vae};
use vidflow_core::datagen::{build_corpus, CorpusConfig};
use vidflow_core::nn::Adam;
use vidflow_core::rng::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);

    let corpus = build_corpus(&CorpusConfig {
        clips: 384,
        multishot_fraction: 0.0,
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap();
    let held = build_corpus(&CorpusConfig {
        clips: 16,
        multishot_fraction: 0.0,
        seed: 1234,
        ..CorpusConfig::default()
    })
    .unwrap();

    let mut rng = Rng::seed_from(102);
    let cfg = CodecConfig::desk();
    let mut vae = Vae::<f32>::init(&cfg, &mut rng);
    let mut opt = Adam::new(lr);
    opt.clip_norm = Some(5.0);
    let t0 = Instant::now();
    for step in 0..steps {
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / steps as f64;
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let b: Vec<_> = (0..batch)
            .map(|i| corpus.clips[(step as usize * batch + i) % corpus.clips.len()].clone())
            .collect();
        let losses = codec_train_step(&mut vae, None, &mut opt, &b, false, 102, step).unwrap();
        if step % 100 == 0 || step == steps - 1 {
            let eval = |set: &[vidflow_core::tensor::Tensor<f32>]| -> f64 {
                let mut total = 0.0;
                for clip in set {
                    let z = vae.encode_mean(clip).unwrap();
                    let recon = vae.decode_tensor(&z).unwrap();
                    total += psnr(&recon, clip);
                }
                total / set.len() as f64
            };
            println!(
                "step {step:4}  l1 {:.4}  kl {:.2}  train-psnr {:.2}  held-psnr {:.2} dB  ({:.1} s)",
                losses.l1,
                losses.kl,
                eval(&corpus.clips[..16]),
                eval(&held.clips),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
