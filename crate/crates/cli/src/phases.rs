//! Phase orchestration: each function is one pipeline phase, reading its
//! inputs from the output directory and writing checkpoints, metrics and a
//! run manifest. The corpus regenerates deterministically from the seed, so
//! phases are self-contained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vidflow_core::align::{
    multi_round, reward_feedback_step, rm_train_step, EvalPrompt, RewardCtx, RewardModel,
    RlhfConfig,
};
use vidflow_core::codec::{
    codec_train_step, discriminator_step, psnr, thin_decoder_retrain, Discriminator, Vae,
};
use vidflow_core::conditioning::{latent_scale, single_shot_sequence, TaskSpec};
use vidflow_core::datagen::caption::{gen_caption, CaptionStyle};
use vidflow_core::datagen::corpus::{build_corpus, eval_scenes, scale_spec, Corpus, CorpusConfig};
use vidflow_core::datagen::curate::{dedup, detect_shots, quality_filter, rebalance};
use vidflow_core::datagen::io::{write_ppm_frames, write_raw};
use vidflow_core::datagen::render::synth_clip;
use vidflow_core::datagen::scene::{Motion, SceneSpec};
use vidflow_core::datagen::{classify, DatasetManifest};
use vidflow_core::diffusion::{
    euler_sample, refiner_from_base, refiner_train_step, run_stage_plan, FlowConfig, SampleSpec,
    TrainSample,
};
use vidflow_core::distill::{
    param_fingerprint, segment_boundaries, tscd_step, DistillConfig, EmaTracker, SegmentPlan,
};
use vidflow_core::dit::DiTModel;
use vidflow_core::error::{Error, Result};
use vidflow_core::nn::Adam;
use vidflow_core::rng::Rng;
use vidflow_core::runtime::{
    balance_batch, pack_dit, pack_vae, round_robin, unpack_dit, unpack_vae, Checkpoint,
    MetricsWriter, RuntimeLut, WorkItem,
};
use vidflow_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::hashing::{config_hash, RunManifest};

fn corpus_cfg(cfg: &RunConfig, frames: usize, size: usize) -> CorpusConfig {
    CorpusConfig {
        clips: cfg.corpus.train_clips,
        size,
        frames_per_shot: frames,
        multishot_fraction: cfg.corpus.multishot_fraction,
        seed: cfg.seed,
    }
}

/// Deterministic per-phase corpus materialization.
pub fn base_corpus(cfg: &RunConfig) -> Result<Corpus> {
    build_corpus(&corpus_cfg(cfg, cfg.corpus.frames_per_shot, cfg.corpus.size))
}

pub fn hifps_corpus(cfg: &RunConfig) -> Result<Corpus> {
    build_corpus(&corpus_cfg(cfg, cfg.corpus.frames_hifps, cfg.corpus.size))
}

fn manifest_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(format!("run_manifest_{name}.json"))
}

/// synth-data: render the corpus to disk (raw dumps + JSONL manifest).
pub fn synth_data(cfg: &RunConfig) -> Result<RunManifest> {
    let corpus = base_corpus(cfg)?;
    let dir = cfg.out_dir.join("corpus");
    std::fs::create_dir_all(&dir)?;
    for (record, clip) in corpus.manifest.records.iter().zip(&corpus.clips) {
        let path = dir.join(&record.video_path).with_extension("bin");
        write_raw(&path, clip)?;
    }
    let manifest_file = dir.join("manifest.jsonl");
    corpus.manifest.save_jsonl(&manifest_file)?;
    let mut manifest = RunManifest::new("synth-data", "data", &config_hash(cfg), cfg.seed);
    manifest.record(&manifest_file)?;
    manifest.save(&manifest_path(cfg, "synth_data"))?;
    Ok(manifest)
}

/// curate: shot detection, quality/static filtering, dedup, rebalancing.
pub fn curate(cfg: &RunConfig) -> Result<RunManifest> {
    let corpus = base_corpus(cfg)?;
    let mut records = corpus.manifest.records.clone();
    // re-detect shot boundaries and store them
    for (record, clip) in records.iter_mut().zip(&corpus.clips) {
        record.shot_boundaries = detect_shots(
            clip,
            cfg.curate.shot_threshold,
            cfg.curate.max_shot_frames,
        );
    }
    let kept = quality_filter(
        &records,
        &corpus.clips,
        cfg.curate.min_quality,
        cfg.curate.static_floor,
    );
    let deduped = dedup(&kept, cfg.curate.dedup_similarity);
    let weights = rebalance(&deduped, &cfg.curate.rebalance_attribute)?;
    let curated = DatasetManifest::new(deduped)?;
    let dir = cfg.out_dir.join("corpus");
    std::fs::create_dir_all(&dir)?;
    let curated_file = dir.join("curated.jsonl");
    curated.save_jsonl(&curated_file)?;
    let weights_file = dir.join("weights.json");
    std::fs::write(&weights_file, serde_json::to_string_pretty(&weights)?)?;
    let hist_file = dir.join("histograms.json");
    let hists: BTreeMap<String, BTreeMap<String, usize>> = ["subject", "action", "style", "camera"]
        .iter()
        .map(|a| (a.to_string(), curated.attribute_histogram(a)))
        .collect();
    std::fs::write(&hist_file, serde_json::to_string_pretty(&hists)?)?;
    let mut manifest = RunManifest::new("curate", "data", &config_hash(cfg), cfg.seed);
    manifest.record(&curated_file)?;
    manifest.record(&weights_file)?;
    manifest.record(&hist_file)?;
    manifest.save(&manifest_path(cfg, "curate"))?;
    Ok(manifest)
}

/// Codec training batches mix base-resolution clips with a slice of
/// high-resolution ones so the decoder serves the refiner grid too.
/// Multi-shot clips are split at their boundaries: hard cuts are not
/// causally encodable as one clip.
fn vae_batches(cfg: &RunConfig) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let corpus = base_corpus(cfg)?;
    let mut base = Vec::with_capacity(corpus.clips.len());
    for (record, clip) in corpus.manifest.records.iter().zip(&corpus.clips) {
        let frames = clip.shape()[0];
        let mut bounds = vec![0usize];
        bounds.extend(&record.shot_boundaries);
        bounds.push(frames);
        for w in bounds.windows(2) {
            base.push(clip.slice(0, w[0], w[1] - w[0])?);
        }
    }
    let hr_count = (cfg.corpus.train_clips as f64 * cfg.codec.hr_fraction) as usize;
    let mut hr = Vec::with_capacity(hr_count);
    for i in 0..hr_count {
        if !corpus.manifest.records[i].shot_boundaries.is_empty() {
            continue;
        }
        let spec = scale_spec(&corpus.specs[i], cfg.corpus.hr_factor as f64);
        hr.push(synth_clip(
            &spec,
            cfg.corpus.size * cfg.corpus.hr_factor,
            cfg.seed ^ i as u64,
        )?);
    }
    Ok((base, hr))
}

/// train-vae: codec training with warmup, adversarial tail, cosine decay and
/// optional resume; emits the checkpoint and a metrics CSV.
pub fn train_vae(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<u64>) -> Result<RunManifest> {
    let hash = config_hash(cfg);
    let (clips, hr_clips) = vae_batches(cfg)?;
    let (mut vae, mut opt, start_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (vae, opt) = unpack_vae(&ckpt)?;
            let step = ckpt.step;
            (vae, opt, step)
        }
        None => {
            let mut rng = Rng::derive(cfg.seed, &["vae", "init"]);
            (
                Vae::init(&cfg.codec.cfg, &mut rng),
                Adam::new(cfg.codec.lr),
                0,
            )
        }
    };
    opt.clip_norm = Some(5.0);
    let mut disc = Discriminator::init(
        "disc",
        2,
        cfg.codec.disc_width,
        &mut Rng::derive(cfg.seed, &["vae", "disc"]),
    );
    let mut dopt = Adam::new(cfg.codec.disc_lr);
    let metrics_file = cfg.out_dir.join("metrics").join("vae.csv");
    let mut metrics = MetricsWriter::create(
        &metrics_file,
        &["step", "l1", "kl", "perceptual", "adversarial"],
    )?;
    let total_steps = cfg.codec.steps;
    let end = stop_after.unwrap_or(total_steps).min(total_steps);
    for step in start_step..end {
        let progress = step as f64 / total_steps as f64;
        opt.lr =
            cfg.codec.lr * (0.3 + 0.7 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut rng = Rng::derive(cfg.seed, &["vae", "batch", &step.to_string()]);
        let use_hr = !hr_clips.is_empty() && rng.uniform() < cfg.codec.hr_fraction;
        let (pool, batch_size) = if use_hr {
            (&hr_clips, (cfg.codec.batch / 4).max(1))
        } else {
            (&clips, cfg.codec.batch)
        };
        let batch: Vec<Tensor<f32>> = (0..batch_size)
            .map(|_| pool[rng.below(pool.len())].clone())
            .collect();
        let adv =
            step >= cfg.codec.disc_start && step < cfg.codec.disc_start + cfg.codec.disc_steps;
        let losses = codec_train_step(
            &mut vae,
            if adv { Some(&disc) } else { None },
            &mut opt,
            &batch,
            adv,
            cfg.seed,
            step,
        )?;
        if adv {
            let fakes: Vec<Tensor<f32>> = batch
                .iter()
                .map(|x| {
                    let z = vae.encode_mean(x)?;
                    vae.decode_tensor(&z)
                })
                .collect::<Result<_>>()?;
            discriminator_step(&mut disc, &mut dopt, &batch, &fakes)?;
        }
        metrics.write_row(&[
            step as f64,
            losses.l1,
            losses.kl,
            losses.perceptual,
            losses.adversarial,
        ])?;
    }
    metrics.flush()?;
    // pack: parameters, optimizer, cursor (the step count) and latent scale
    let mut ckpt = pack_vae(&vae, Some(&opt), "vae", end, &hash)?;
    let latents: Vec<Tensor<f32>> = clips
        .iter()
        .take(64)
        .map(|c| vae.encode_mean(c))
        .collect::<Result<_>>()?;
    ckpt.extra
        .insert("latent_scale".into(), format!("{}", latent_scale(&latents)));
    let ckpt_path = cfg.out_dir.join("vae.ckpt");
    ckpt.save(&ckpt_path)?;

    let mut manifest = RunManifest::new("train-vae", "vae", &hash, cfg.seed);
    manifest.record(&ckpt_path)?;
    manifest.record(&metrics_file)?;

    if end == total_steps && !cfg.codec.thin_widths.is_empty() {
        let thin = thin_decoder_retrain(
            &vae,
            &cfg.codec.thin_widths,
            &clips[..clips.len().min(96)],
            cfg.codec.thin_steps,
            cfg.codec.lr,
            cfg.seed ^ 0x7777,
        )?;
        let mut thin_cfg = vae.cfg.clone();
        thin_cfg.dec_widths = cfg.codec.thin_widths.clone();
        let thin_vae = Vae {
            cfg: thin_cfg,
            encoder: vae.encoder.clone(),
            decoder: thin,
        };
        let mut thin_ckpt = pack_vae(&thin_vae, None, "vae-thin", end, &hash)?;
        thin_ckpt
            .extra
            .insert("thin_widths".into(), format!("{:?}", cfg.codec.thin_widths));
        let thin_path = cfg.out_dir.join("vae_thin.ckpt");
        thin_ckpt.save(&thin_path)?;
        manifest.record(&thin_path)?;
    }
    manifest.save(&manifest_path(cfg, "train_vae"))?;
    Ok(manifest)
}

pub fn load_vae(cfg: &RunConfig) -> Result<(Vae<f32>, f64)> {
    let path = cfg.out_dir.join("vae.ckpt");
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing codec checkpoint {path:?}; run train-vae first"
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    let (vae, _) = unpack_vae(&ckpt)?;
    let scale: f64 = ckpt
        .extra
        .get("latent_scale")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    Ok((vae, scale))
}

/// Prepared training set: scaled latents plus caption variants, one entry
/// per corpus clip, plus inverse-frequency sampling weights.
pub struct PreparedSet {
    pub samples: Vec<TrainSample<f32>>,
    pub weights: Vec<f64>,
}

pub fn prepare_samples(cfg: &RunConfig, corpus: &Corpus, vae: &Vae<f32>, scale: f64) -> Result<PreparedSet> {
    let mut samples = Vec::with_capacity(corpus.clips.len());
    for (record, (spec, clip)) in corpus
        .manifest
        .records
        .iter()
        .zip(corpus.specs.iter().zip(&corpus.clips))
    {
        // encode per shot (hard cuts break causal encoding)
        let frames = clip.shape()[0];
        let mut bounds = vec![0usize];
        bounds.extend(&record.shot_boundaries);
        bounds.push(frames);
        let mut latents = Vec::new();
        let mut shot_latent_frames = Vec::new();
        for w in bounds.windows(2) {
            let shot_clip = clip.slice(0, w[0], w[1] - w[0])?;
            let z = vae.encode_mean(&shot_clip)?.scale(scale as f32);
            shot_latent_frames.push(z.shape()[0]);
            latents.push(z);
        }
        let latent = Tensor::concat(&latents.iter().collect::<Vec<_>>(), 0)?;
        let captions_long: Vec<String> = spec
            .shots
            .iter()
            .map(|s| gen_caption(&SceneSpec::single(s.clone()), CaptionStyle::Long))
            .collect();
        let captions_short: Vec<String> = spec
            .shots
            .iter()
            .map(|s| gen_caption(&SceneSpec::single(s.clone()), CaptionStyle::Short))
            .collect();
        // a still-ized first shot captions the single-frame image draw
        let mut image_shot = spec.shots[0].clone();
        for (_, motion) in &mut image_shot.shapes {
            *motion = Motion::still();
        }
        image_shot.camera = vidflow_core::datagen::scene::Camera::Static;
        let caption_image = gen_caption(&SceneSpec::single(image_shot), CaptionStyle::Long);
        samples.push(TrainSample {
            latent,
            shot_latent_frames,
            captions_long,
            captions_short,
            caption_image,
        });
    }
    let weights = rebalance(&corpus.manifest.records, &cfg.curate.rebalance_attribute)?;
    Ok(PreparedSet { samples, weights })
}

/// train-dit: the progressive stage plan (pretrain stages plus the
/// continue-training stage), emitting one checkpoint per stage.
pub fn train_dit(cfg: &RunConfig) -> Result<RunManifest> {
    let hash = config_hash(cfg);
    let (vae, scale) = load_vae(cfg)?;
    let base = base_corpus(cfg)?;
    let hifps = hifps_corpus(cfg)?;
    let set_base = prepare_samples(cfg, &base, &vae, scale)?;
    let set_hifps = prepare_samples(cfg, &hifps, &vae, scale)?;

    let mut model = DiTModel::init(&cfg.dit, &mut Rng::derive(cfg.seed, &["dit", "init"]))?;
    let metrics_file = cfg.out_dir.join("metrics").join("dit.csv");
    let mut metrics = MetricsWriter::create(&metrics_file, &["stage", "step", "loss"])?;
    let flow = FlowConfig::default();
    let out_dir = cfg.out_dir.clone();
    let mut stage_paths = Vec::new();
    let seed = cfg.seed;
    let frames_per_shot = cfg.corpus.frames_per_shot;
    {
        let metrics = std::cell::RefCell::new(&mut metrics);
        let stage_paths = std::cell::RefCell::new(&mut stage_paths);
        let codec = cfg.codec.cfg.clone();
        run_stage_plan(
            &mut model,
            &cfg.plan,
            &flow,
            cfg.dit.max_text_tokens,
            seed,
            // model tokens of one clip at this stage's format
            move |stage| {
                let latent_frames = (stage.frames.max(1) - 1) / codec.r_t + 1;
                latent_frames * (stage.resolution / codec.r_h) * (stage.resolution / codec.r_w)
            },
            |stage_idx, step, batch_size| {
                let set = if cfg.plan.stages[stage_idx].frames > frames_per_shot {
                    &set_hifps
                } else {
                    &set_base
                };
                let mut rng = Rng::derive(
                    seed,
                    &["dit", "draw", &stage_idx.to_string(), &step.to_string()],
                );
                Ok((0..batch_size)
                    .map(|_| set.samples[rng.weighted(&set.weights)].clone())
                    .collect())
            },
            |stage_idx, model, report| {
                metrics.borrow_mut().write_row(&[
                    stage_idx as f64,
                    report.steps as f64,
                    report.final_loss,
                ])?;
                let mut ckpt = pack_dit(model, None, &report.name, report.steps as u64, &hash)?;
                ckpt.extra.insert("latent_scale".into(), scale.to_string());
                ckpt.extra
                    .insert("stage".into(), serde_json::to_string(report)?);
                let path = out_dir.join(format!("dit_stage{stage_idx}.ckpt"));
                ckpt.save(&path)?;
                stage_paths.borrow_mut().push(path);
                Ok(())
            },
        )?;
    }
    metrics.flush()?;
    let mut final_ckpt = pack_dit(&model, None, "pretrain", cfg.plan.stages.len() as u64, &hash)?;
    final_ckpt
        .extra
        .insert("latent_scale".into(), scale.to_string());
    let final_path = cfg.out_dir.join("dit.ckpt");
    final_ckpt.save(&final_path)?;
    let mut manifest = RunManifest::new("train-dit", "pretrain", &hash, cfg.seed);
    for p in &stage_paths {
        manifest.record(p)?;
    }
    manifest.record(&final_path)?;
    manifest.record(&metrics_file)?;
    manifest.save(&manifest_path(cfg, "train_dit"))?;
    Ok(manifest)
}

pub fn load_dit(cfg: &RunConfig, name: &str) -> Result<(DiTModel<f32>, f64)> {
    let path = cfg.out_dir.join(name);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {path:?}; run the earlier phases first"
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    let (model, _) = unpack_dit(&ckpt)?;
    let scale: f64 = ckpt
        .extra
        .get("latent_scale")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    Ok((model, scale))
}

/// LR/HR latent pairs for the refiner: the same scenes rendered at both
/// resolutions, encoded and scaled.
pub fn refiner_pairs(
    cfg: &RunConfig,
    vae: &Vae<f32>,
    scale: f64,
    count: usize,
    seed_salt: u64,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>, vidflow_core::dit::TokenSequence, String)>> {
    let corpus = base_corpus(cfg)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let idx = i % corpus.specs.len();
        if !corpus.manifest.records[idx].shot_boundaries.is_empty() {
            continue;
        }
        let spec = &corpus.specs[idx];
        let hr_spec = scale_spec(spec, cfg.corpus.hr_factor as f64);
        let lr_clip = &corpus.clips[idx];
        let hr_clip = synth_clip(
            &hr_spec,
            cfg.corpus.size * cfg.corpus.hr_factor,
            cfg.seed ^ idx as u64 ^ seed_salt,
        )?;
        let lr_z = vae.encode_mean(lr_clip)?.scale(scale as f32);
        let hr_z = vae.encode_mean(&hr_clip)?.scale(scale as f32);
        let caption = gen_caption(spec, CaptionStyle::Long);
        let seq = single_shot_sequence(&caption, hr_z.shape(), cfg.dit.max_text_tokens)?;
        out.push((lr_z, hr_z, seq, caption));
    }
    Ok(out)
}

/// train-refiner: initialize from the base model, train on LR/HR pairs.
pub fn train_refiner(cfg: &RunConfig) -> Result<RunManifest> {
    let hash = config_hash(cfg);
    let (vae, scale) = load_vae(cfg)?;
    let (base_model, _) = load_dit(cfg, "dit.ckpt")?;
    let mut refiner = refiner_from_base(&base_model)?;
    let pairs = refiner_pairs(cfg, &vae, scale, cfg.corpus.train_clips / 2, 0x5151)?;
    let mut opt = Adam::new(cfg.refiner.lr);
    let flow = FlowConfig::default();
    let metrics_file = cfg.out_dir.join("metrics").join("refiner.csv");
    let mut metrics = MetricsWriter::create(&metrics_file, &["step", "loss"])?;
    for step in 0..cfg.refiner.steps {
        let mut rng = Rng::derive(cfg.seed, &["refiner", "batch", &step.to_string()]);
        let batch: Vec<_> = (0..cfg.refiner.batch)
            .map(|_| {
                let (lr, hr, seq, _) = &pairs[rng.below(pairs.len())];
                (lr.clone(), hr.clone(), seq.clone())
            })
            .collect();
        let loss = refiner_train_step(
            &mut refiner,
            &mut opt,
            &batch,
            &flow,
            cfg.corpus.hr_factor,
            cfg.seed,
            step,
        )?;
        metrics.write_row(&[step as f64, loss])?;
    }
    metrics.flush()?;
    let mut ckpt = pack_dit(&refiner, Some(&opt), "refine", cfg.refiner.steps, &hash)?;
    ckpt.extra.insert("latent_scale".into(), scale.to_string());
    ckpt.extra
        .insert("hr_factor".into(), cfg.corpus.hr_factor.to_string());
    let path = cfg.out_dir.join("refiner.ckpt");
    ckpt.save(&path)?;
    let mut manifest = RunManifest::new("train-refiner", "refine", &hash, cfg.seed);
    manifest.record(&path)?;
    manifest.record(&metrics_file)?;
    manifest.save(&manifest_path(cfg, "train_refiner"))?;
    Ok(manifest)
}

/// distill: trajectory-segmented consistency distillation of the base model.
pub fn distill(cfg: &RunConfig) -> Result<RunManifest> {
    let hash = config_hash(cfg);
    let (vae, scale) = load_vae(cfg)?;
    let (teacher, _) = load_dit(cfg, "dit.ckpt")?;
    let corpus = base_corpus(cfg)?;
    let set = prepare_samples(cfg, &corpus, &vae, scale)?;
    let plan = segment_boundaries(cfg.distill.segments, cfg.distill.grid_n)?;
    let dcfg = DistillConfig {
        plan: plan.clone(),
        flow: FlowConfig::default(),
        teacher_substeps: cfg.distill.teacher_substeps,
        ema_decay: cfg.distill.ema_decay,
        lr: cfg.distill.lr,
    };
    let mut student = teacher.clone();
    let mut ema = EmaTracker::new(&student, cfg.distill.ema_decay);
    let mut opt = Adam::new(cfg.distill.lr);
    let teacher_before = param_fingerprint(&teacher.params());
    let metrics_file = cfg.out_dir.join("metrics").join("distill.csv");
    let mut metrics = MetricsWriter::create(&metrics_file, &["step", "loss"])?;
    for step in 0..cfg.distill.steps {
        let mut rng = Rng::derive(cfg.seed, &["distill", "batch", &step.to_string()]);
        let batch: Vec<(Tensor<f32>, vidflow_core::dit::TokenSequence)> = (0..cfg.distill.batch)
            .map(|_| {
                // single-shot latents only (multishot clips keep their first shot)
                let s = &set.samples[rng.weighted(&set.weights)];
                let frames0 = s.shot_latent_frames[0];
                let latent = s.latent.slice(0, 0, frames0)?;
                let seq = single_shot_sequence(
                    &s.captions_long[0],
                    latent.shape(),
                    cfg.dit.max_text_tokens,
                )?;
                Ok((latent, seq))
            })
            .collect::<Result<_>>()?;
        let loss = tscd_step(
            &mut student,
            &teacher,
            &mut ema,
            &mut opt,
            &dcfg,
            &batch,
            cfg.seed,
            step,
        )?;
        metrics.write_row(&[step as f64, loss])?;
    }
    metrics.flush()?;
    if param_fingerprint(&teacher.params()) != teacher_before {
        return Err(Error::invalid("teacher parameters changed during distillation"));
    }
    // export the EMA-stabilized student with the plan in the header
    let mut exported = student.clone();
    ema.apply_to(&mut exported);
    let mut ckpt = pack_dit(&exported, None, "distill", cfg.distill.steps, &hash)?;
    ckpt.extra.insert("latent_scale".into(), scale.to_string());
    ckpt.extra
        .insert("segment_plan".into(), serde_json::to_string(&plan)?);
    let path = cfg.out_dir.join("student.ckpt");
    ckpt.save(&path)?;
    let mut manifest = RunManifest::new("distill", "distill", &hash, cfg.seed);
    manifest.record(&path)?;
    manifest.record(&metrics_file)?;
    manifest.save(&manifest_path(cfg, "distill"))?;
    Ok(manifest)
}

pub fn load_student(cfg: &RunConfig) -> Result<(DiTModel<f32>, SegmentPlan, f64)> {
    let path = cfg.out_dir.join("student.ckpt");
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing student checkpoint {path:?}; run distill first"
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    let (model, _) = unpack_dit(&ckpt)?;
    let plan: SegmentPlan = serde_json::from_str(
        ckpt.extra
            .get("segment_plan")
            .ok_or_else(|| Error::Checkpoint("student checkpoint lacks its segment plan".into()))?,
    )?;
    let scale: f64 = ckpt
        .extra
        .get("latent_scale")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    Ok((model, plan, scale))
}

/// Fixed eval prompt set for reward curves and policy batches.
pub fn rlhf_prompts(cfg: &RunConfig, n: usize) -> Vec<EvalPrompt> {
    let latent_frames = (cfg.corpus.frames_per_shot - 1) / cfg.codec.cfg.r_t + 1;
    let grid = cfg.corpus.size / cfg.codec.cfg.r_h;
    let scenes = eval_scenes(n, cfg.corpus.size, cfg.corpus.frames_per_shot, cfg.seed ^ 0xa11);
    scenes
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let shot = &spec.shots[0];
            EvalPrompt {
                caption: gen_caption(spec, CaptionStyle::Long),
                ctx: RewardCtx {
                    target_color: shot.shapes[0].0.color,
                    background: shot.background,
                },
                latent_shape: vec![latent_frames, grid, grid, cfg.codec.cfg.latent_channels],
                seed: cfg.seed ^ (0xe7a1 + i as u64),
            }
        })
        .collect()
}

pub struct RlhfOutcome {
    pub manifest: RunManifest,
    pub curve: Vec<f64>,
    pub rounds: Vec<vidflow_core::align::RoundReport>,
    pub rm_hash_before: u64,
    pub rm_hash_after: u64,
}

/// Persisted form of the outcome so later inspection does not rerun the phase.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct RlhfSummary {
    pub curve: Vec<f64>,
    pub rounds: Vec<vidflow_core::align::RoundReport>,
    pub rm_hash_before: u64,
    pub rm_hash_after: u64,
}

/// rlhf: a reward-feedback phase ascending the toy composite (with a learned
/// scorer mixed in, hash-checked frozen), then multi-round iteration.
pub fn rlhf(cfg: &RunConfig) -> Result<RlhfOutcome> {
    let hash = config_hash(cfg);
    let (vae, scale) = load_vae(cfg)?;
    let (mut model, _) = load_dit(cfg, "dit.ckpt")?;
    let prompts = rlhf_prompts(cfg, cfg.rlhf.eval_prompts);

    // reward models: the fixed toy triplet plus one learned scorer,
    // pre-trained on planted pairs
    let mut learned = RewardModel::learned("rm.motion", &mut Rng::derive(cfg.seed, &["rlhf", "rm"]));
    {
        let pairs = vidflow_core::align::rm::planted_pairs::<f32>(128, cfg.seed ^ 0x9a);
        let mut rm_opt = Adam::new(3e-3);
        for step in 0..cfg.rlhf.rm_steps {
            rm_train_step(&mut learned, &mut rm_opt, &pairs[step % pairs.len()])?;
        }
    }
    let mut rms = RewardModel::toy_suite();
    rms.push(learned);
    let weights = vec![0.3, 0.3, 0.3, 0.1];
    let rlhf_cfg = RlhfConfig {
        flow: FlowConfig::default(),
        t_lo: cfg.rlhf.t_lo,
        t_hi: cfg.rlhf.t_hi,
        prefix_steps: cfg.rlhf.prefix_steps,
        weights: weights.clone(),
        latent_scale: scale,
        max_text_tokens: cfg.dit.max_text_tokens,
    };
    let rm_params: Vec<&vidflow_core::nn::P<f32>> = rms.iter().flat_map(|r| r.params()).collect();
    let rm_hash_before = param_fingerprint(&rm_params);
    drop(rm_params);

    let metrics_file = cfg.out_dir.join("metrics").join("rlhf.csv");
    let mut metrics = MetricsWriter::create(
        &metrics_file,
        &["step", "foundational", "motion", "aesthetic", "learned", "composite"],
    )?;
    let mut opt = Adam::new(cfg.rlhf.lr);
    let mut curve = Vec::with_capacity(cfg.rlhf.feedback_steps as usize);
    for step in 0..cfg.rlhf.feedback_steps {
        let mut rng = Rng::derive(cfg.seed, &["rlhf", "prompts", &step.to_string()]);
        let batch: Vec<EvalPrompt> = (0..cfg.rlhf.batch)
            .map(|_| prompts[rng.below(prompts.len())].clone())
            .collect();
        let report = reward_feedback_step(
            &mut model,
            &vae,
            &mut opt,
            &rms,
            &batch,
            &rlhf_cfg,
            cfg.seed,
            step,
        )?;
        metrics.write_row(&[
            step as f64,
            report.per_rm[0],
            report.per_rm[1],
            report.per_rm[2],
            report.per_rm[3],
            report.composite,
        ])?;
        curve.push(report.composite);
    }
    metrics.flush()?;
    let rm_params: Vec<&vidflow_core::nn::P<f32>> = rms.iter().flat_map(|r| r.params()).collect();
    let rm_hash_after = param_fingerprint(&rm_params);
    drop(rm_params);

    // multi-round iteration against refreshed learned scorers
    let label_rms = RewardModel::toy_suite();
    let label_weights = vec![1.0 / 3.0; 3];
    let mut learned_set = vec![RewardModel::learned(
        "rm.round",
        &mut Rng::derive(cfg.seed, &["rlhf", "round_rm"]),
    )];
    let rounds = multi_round(
        &mut model,
        &vae,
        &mut learned_set,
        &label_rms,
        &label_weights,
        &prompts[..cfg.rlhf.eval_prompts.min(8)],
        &rlhf_cfg,
        cfg.rlhf.rounds,
        cfg.rlhf.rm_steps,
        cfg.rlhf.round_policy_steps,
        cfg.rlhf.lr,
        cfg.seed ^ 0xb0b,
    )?;

    let mut ckpt = pack_dit(&model, None, "rlhf", cfg.rlhf.feedback_steps, &hash)?;
    ckpt.extra.insert("latent_scale".into(), scale.to_string());
    ckpt.extra
        .insert("rlhf_rounds".into(), cfg.rlhf.rounds.to_string());
    let path = cfg.out_dir.join("rlhf.ckpt");
    ckpt.save(&path)?;
    let summary = RlhfSummary {
        curve: curve.clone(),
        rounds: rounds.clone(),
        rm_hash_before,
        rm_hash_after,
    };
    let summary_path = cfg.out_dir.join("rlhf_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    let mut manifest = RunManifest::new("rlhf", "rlhf", &hash, cfg.seed);
    manifest.record(&path)?;
    manifest.record(&metrics_file)?;
    manifest.record(&summary_path)?;
    manifest.save(&manifest_path(cfg, "rlhf"))?;
    Ok(RlhfOutcome {
        manifest,
        curve,
        rounds,
        rm_hash_before,
        rm_hash_after,
    })
}

pub struct SampleRequest<'a> {
    pub prompt: &'a str,
    pub nfe: usize,
    pub out: &'a Path,
    pub image: Option<&'a Path>,
    pub seed: u64,
}

/// sample: text-to-video (or image-to-video with a reference image) through
/// the configured checkpoint, decoded and written as PPM frames.
pub fn sample(cfg: &RunConfig, req: &SampleRequest) -> Result<RunManifest> {
    let hash = config_hash(cfg);
    let (vae, _) = load_vae(cfg)?;
    let (model, scale) = load_dit(cfg, &cfg.sample.checkpoint)?;
    let latent_frames = (cfg.sample.frames - 1) / cfg.codec.cfg.r_t + 1;
    let grid = cfg.corpus.size / cfg.codec.cfg.r_h;
    let shape = vec![
        latent_frames,
        grid,
        grid,
        cfg.codec.cfg.latent_channels,
    ];
    let seq = single_shot_sequence(req.prompt, &shape, cfg.dit.max_text_tokens)?;
    let (task, reference) = match req.image {
        Some(path) => {
            let image: Tensor<f32> = vidflow_core::datagen::io::read_raw(path)
                .or_else(|_| vidflow_core::datagen::io::read_ppm_frames(path))?;
            let first = image.slice(0, 0, 1)?;
            let z = vae.encode_mean(&first)?.scale(scale as f32);
            // reference latent: clean first frame, zero elsewhere
            let mut full = Tensor::zeros(&shape);
            let frame = shape[1] * shape[2] * shape[3];
            full.data_mut()[..frame].copy_from_slice(&z.data()[..frame]);
            (TaskSpec::i2v(), Some(full))
        }
        None => (TaskSpec::t2v(), None),
    };
    let spec = SampleSpec {
        cond: vidflow_core::diffusion::CondMode::Masked { task, reference },
        latent_shape: shape,
        seed: req.seed,
        guidance: 1.0,
        uncond_seq: None,
    };
    let flow = FlowConfig::default();
    let (latent, nfe_used) = euler_sample(&model, &seq, &spec, &flow, req.nfe)?;
    let video = vae.decode_tensor(&latent.scale(1.0 / scale as f32))?;
    std::fs::create_dir_all(req.out)?;
    write_ppm_frames(req.out, &video)?;
    let mut manifest = RunManifest::new("sample", "sample", &hash, req.seed);
    manifest.record_dir_recursive(req.out)?;
    manifest.save(&req.out.join("run_manifest.json"))?;
    let _ = nfe_used;
    Ok(manifest)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub color_accuracy: f64,
    pub motion_accuracy: f64,
    pub joint_accuracy: f64,
    pub i2v_first_frame_psnr: f64,
}

/// eval: prompt-following accuracy on held-out scenes plus first-frame
/// preservation for image-to-video.
pub fn evaluate(
    cfg: &RunConfig,
    model: &DiTModel<f32>,
    vae: &Vae<f32>,
    scale: f64,
    n_prompts: usize,
    nfe: usize,
) -> Result<EvalReport> {
    let scenes = eval_scenes(
        n_prompts,
        cfg.corpus.size,
        cfg.corpus.frames_per_shot,
        cfg.seed ^ 0xea1,
    );
    let latent_frames = (cfg.corpus.frames_per_shot - 1) / cfg.codec.cfg.r_t + 1;
    let grid = cfg.corpus.size / cfg.codec.cfg.r_h;
    let shape = vec![latent_frames, grid, grid, cfg.codec.cfg.latent_channels];
    let flow = FlowConfig::default();

    use rayon::prelude::*;
    let results: Vec<Result<(bool, bool, f64)>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
        let caption = gen_caption(scene, CaptionStyle::Long);
        let seq = single_shot_sequence(&caption, &shape, cfg.dit.max_text_tokens)?;
        let spec = SampleSpec::new(TaskSpec::t2v(), None, &shape, cfg.seed ^ (0x5a0 + i as u64));
        let (latent, _) = euler_sample(model, &seq, &spec, &flow, nfe)?;
        let video = vae.decode_tensor(&latent.scale(1.0 / scale as f32))?;
        let shot = &scene.shots[0];
        let want_color = vidflow_core::datagen::scene::color_name(&shot.shapes[0].0.color);
        let want_motion = vidflow_core::datagen::caption::motion_word(&shot.shapes[0].1);
        let got_color = classify::classify_color(&video, &shot.background);
        let got_motion = classify::classify_motion(&video, &shot.background);
        let c = got_color == want_color;
        let m = got_motion == want_motion;

        // image-to-video: first frame given, measure its preservation
        let clip = synth_clip(scene, cfg.corpus.size, cfg.seed ^ (0xbee + i as u64))?;
        let first = clip.slice(0, 0, 1)?;
        let z_first = vae.encode_mean(&first)?.scale(scale as f32);
        let mut reference = Tensor::zeros(&shape);
        let frame = shape[1] * shape[2] * shape[3];
        reference.data_mut()[..frame].copy_from_slice(&z_first.data()[..frame]);
        let i2v_spec = SampleSpec::new(
            TaskSpec::i2v(),
            Some(reference),
            &shape,
            cfg.seed ^ (0x1b0 + i as u64),
        );
        let (i2v_latent, _) = euler_sample(model, &seq, &i2v_spec, &flow, nfe)?;
        let i2v_video = vae.decode_tensor(&i2v_latent.scale(1.0 / scale as f32))?;
        let decoded_first = i2v_video.slice(0, 0, 1)?;
        Ok((c, m, psnr(&decoded_first, &first)))
        })
        .collect();
    let mut color_ok = 0usize;
    let mut motion_ok = 0usize;
    let mut joint_ok = 0usize;
    let mut psnr_sum = 0.0f64;
    for r in results {
        let (c, m, p) = r?;
        color_ok += c as usize;
        motion_ok += m as usize;
        joint_ok += (c && m) as usize;
        psnr_sum += p;
    }
    let n = scenes.len() as f64;
    Ok(EvalReport {
        prompts: scenes.len(),
        color_accuracy: color_ok as f64 / n,
        motion_accuracy: motion_ok as f64 / n,
        joint_accuracy: joint_ok as f64 / n,
        i2v_first_frame_psnr: psnr_sum / n,
    })
}

pub fn eval_phase(cfg: &RunConfig, n_prompts: usize) -> Result<(EvalReport, RunManifest)> {
    let hash = config_hash(cfg);
    let (vae, _) = load_vae(cfg)?;
    let (model, scale) = load_dit(cfg, &cfg.sample.checkpoint)?;
    let report = evaluate(cfg, &model, &vae, scale, n_prompts, cfg.sample.nfe)?;
    let path = cfg.out_dir.join("eval_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    let mut manifest = RunManifest::new("eval", "eval", &hash, cfg.seed);
    manifest.record(&path)?;
    manifest.save(&manifest_path(cfg, "eval"))?;
    Ok((report, manifest))
}

/// merge: weighted parameter average of the configured checkpoints.
pub fn merge(cfg: &RunConfig) -> Result<RunManifest> {
    let section = cfg
        .merge
        .as_ref()
        .ok_or_else(|| Error::Config("config has no merge section".into()))?;
    let loaded: Vec<Checkpoint> = section
        .inputs
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::Config(format!("missing merge input {p:?}")));
            }
            Checkpoint::load(p)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Checkpoint> = loaded.iter().collect();
    let merged = vidflow_core::runtime::merge_models(&refs, &section.weights)?;
    merged.save(&section.output)?;
    let mut manifest = RunManifest::new("merge", "sft", &config_hash(cfg), cfg.seed);
    manifest.record(&section.output)?;
    manifest.save(&manifest_path(cfg, "merge"))?;
    Ok(manifest)
}

/// balance-demo: seeded random workload, greedy-balanced vs round robin.
pub fn balance_demo(items: usize, ranks: usize, seed: u64) -> Result<(f64, f64)> {
    if items == 0 || ranks == 0 {
        return Err(Error::Config("items and ranks must be >= 1".into()));
    }
    // a seqlen -> runtime lookup table measured on a stand-in kernel
    let lens = [16usize, 32, 64, 128, 256];
    let lut = RuntimeLut::measure(&lens, |len| {
        let a = Tensor::<f32>::full(&[len, 64], 1.0);
        let b = Tensor::<f32>::full(&[64, 64], 1.0);
        let _ = a.matmul(&b)?;
        Ok(())
    })?;
    let mut rng = Rng::derive(seed, &["balance-demo"]);
    let work: Vec<WorkItem> = (0..items)
        .map(|i| {
            let seq_len = lens[rng.below(lens.len())] + rng.below(16);
            WorkItem {
                id: i as u64,
                seq_len,
                runtime: lut.estimate(seq_len) * rng.range(0.9, 1.1),
            }
        })
        .collect();
    let balanced = balance_batch(&work, ranks)?;
    let rr = round_robin(&work, ranks);
    Ok((balanced.makespan, rr.makespan))
}
