//! End-to-end pipeline shakedown and calibration.
//! cargo run -p vidflow-cli --example pipeline_bench --release -- <outdir> <phase...>

use std::path::Path;
use std::time::Instant;

use vidflow_cli::config::RunConfig;
use vidflow_cli::phases;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "/tmp/vf_pipe".into());
    let which: Vec<String> = args[2..].to_vec();
    let run_all = which.is_empty();
    let has = |name: &str| run_all || which.iter().any(|w| w == name);

    let mut cfg = RunConfig::desk(Path::new(&out), 0);
    if let Ok(v) = std::env::var("VF_VAE_STEPS") {
        cfg.codec.steps = v.parse().unwrap();
    }
    std::fs::create_dir_all(&cfg.out_dir).unwrap();

    let t0 = Instant::now();
    let stamp = |label: &str, t: &Instant| {
        println!("[{:8.1}s] {label} done in {:.1}s", t0.elapsed().as_secs_f64(), t.elapsed().as_secs_f64());
    };

    if has("vae") {
        let t = Instant::now();
        phases::train_vae(&cfg, None, None).unwrap();
        stamp("vae", &t);
        // report codec quality on held-out eval scenes
        let (vae, _) = phases::load_vae(&cfg).unwrap();
        let scenes = vidflow_core::datagen::corpus::eval_scenes(16, 16, 5, cfg.seed ^ 0xea1);
        let mut total = 0.0;
        for (i, s) in scenes.iter().enumerate() {
            let clip = vidflow_core::datagen::render::synth_clip(s, 16, 7777 + i as u64).unwrap();
            let z = vae.encode_mean(&clip).unwrap();
            let recon = vae.decode_tensor(&z).unwrap();
            total += vidflow_core::codec::psnr(&recon, &clip);
        }
        println!("codec held-out PSNR: {:.2} dB", total / 16.0);
    }
    if has("dit") {
        let t = Instant::now();
        phases::train_dit(&cfg).unwrap();
        stamp("dit", &t);
        let (vae, _) = phases::load_vae(&cfg).unwrap();
        let (model, scale) = phases::load_dit(&cfg, "dit.ckpt").unwrap();
        let report = phases::evaluate(&cfg, &model, &vae, scale, 32, 32).unwrap();
        println!("eval: {report:?}");
    }
    if has("refiner") {
        let t = Instant::now();
        phases::train_refiner(&cfg).unwrap();
        stamp("refiner", &t);
    }
    if has("distill") {
        let t = Instant::now();
        phases::distill(&cfg).unwrap();
        stamp("distill", &t);
    }
    if has("rlhf") {
        let t = Instant::now();
        let outcome = phases::rlhf(&cfg).unwrap();
        stamp("rlhf", &t);
        println!(
            "rlhf curve: {:.4} -> {:.4}; rounds: {:?}",
            outcome.curve.first().unwrap(),
            outcome.curve.last().unwrap(),
            outcome
                .rounds
                .iter()
                .map(|r| r.eval_composite)
                .collect::<Vec<_>>()
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
