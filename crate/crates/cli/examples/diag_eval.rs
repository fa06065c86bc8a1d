//! Per-prompt evaluation diagnostics against a trained pipeline directory.

use std::path::Path;

use vidflow_cli::config::RunConfig;
use vidflow_cli::phases;
use vidflow_core::conditioning::{single_shot_sequence, TaskSpec};
use vidflow_core::datagen::corpus::eval_scenes;
use vidflow_core::datagen::{classify, gen_caption, CaptionStyle};
use vidflow_core::diffusion::{euler_sample, FlowConfig, SampleSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "/root/vf_calib".into());
    let ckpt = args.get(2).cloned().unwrap_or_else(|| "dit.ckpt".into());
    let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let cfg = RunConfig::desk(Path::new(&out), 0);
    let (vae, _) = phases::load_vae(&cfg).unwrap();
    let (model, scale) = phases::load_dit(&cfg, &ckpt).unwrap();
    let scenes = eval_scenes(n, cfg.corpus.size, cfg.corpus.frames_per_shot, cfg.seed ^ 0xea1);
    let shape = vec![3usize, 4, 4, 8];
    let flow = FlowConfig::default();
    let mut joint = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let caption = gen_caption(scene, CaptionStyle::Long);
        let seq = single_shot_sequence(&caption, &shape, 16).unwrap();
        let spec = SampleSpec::new(TaskSpec::t2v(), None, &shape, cfg.seed ^ (0x5a0 + i as u64));
        let (latent, _) = euler_sample(&model, &seq, &spec, &flow, 32).unwrap();
        let video = vae.decode_tensor(&latent.scale(1.0 / scale as f32)).unwrap();
        let shot = &scene.shots[0];
        let want_color = vidflow_core::datagen::scene::color_name(&shot.shapes[0].0.color);
        let want_motion = vidflow_core::datagen::caption::motion_word(&shot.shapes[0].1);
        let got_color = classify::classify_color(&video, &shot.background);
        let got_motion = classify::classify_motion(&video, &shot.background);
        let ok = got_color == want_color && got_motion == want_motion;
        joint += ok as usize;
        let bg = if shot.background[0] > 0.1 { "gray " } else { "black" };
        println!(
            "{i:2} {} want ({want_color:7}, {want_motion:5}) got ({got_color:7}, {got_motion:5}) bg {bg} speed {:.2}",
            if ok { "OK  " } else { "MISS" },
            (shot.shapes[0].1.velocity.0.powi(2) + shot.shapes[0].1.velocity.1.powi(2)).sqrt(),
        );
    }
    println!("joint {}/{}", joint, n);
}
