use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vidflow_cli::config::RunConfig;
use vidflow_cli::phases;
use vidflow_core::error::Error;

#[derive(Parser)]
#[command(
    name = "vidflow",
    about = "Desk-scale video generation stack: data synthesis, codec and transformer training, distillation, alignment, sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and write its manifest
    SynthData(ConfigArgs),
    /// Shot detection, quality filtering, dedup and rebalancing
    Curate(ConfigArgs),
    /// Train the video codec (optionally resuming from a checkpoint)
    TrainVae {
        #[command(flatten)]
        common: ConfigArgs,
        /// Resume from a previously written codec checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (for interrupt/resume workflows)
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run the progressive transformer training plan
    TrainDit(ConfigArgs),
    /// Train the cascaded refiner from the base model
    TrainRefiner(ConfigArgs),
    /// Consistency-distill the base model into a few-step student
    Distill(ConfigArgs),
    /// Reward-maximization fine-tuning plus multi-round iteration
    Rlhf(ConfigArgs),
    /// Generate a clip from a prompt (image-to-video with --image)
    Sample {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Reference image (raw dump or PPM frame directory)
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Prompt-following and first-frame preservation metrics
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, default_value_t = 32)]
        prompts: usize,
    },
    /// Weighted parameter-space merge of checkpoints
    Merge(ConfigArgs),
    /// Workload balancing demonstration
    BalanceDemo {
        #[arg(long, default_value_t = 64)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

fn load(common: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthData(common) => {
            let cfg = load(&common)?;
            let manifest = phases::synth_data(&cfg)?;
            println!("corpus written: {} outputs", manifest.outputs.len());
        }
        Command::Curate(common) => {
            let cfg = load(&common)?;
            let manifest = phases::curate(&cfg)?;
            println!("curation done: {} outputs", manifest.outputs.len());
        }
        Command::TrainVae {
            common,
            resume,
            stop_after,
        } => {
            let cfg = load(&common)?;
            phases::train_vae(&cfg, resume.as_deref(), stop_after)?;
            println!(
                "codec checkpoint written to {:?}",
                cfg.out_dir.join("vae.ckpt")
            );
        }
        Command::TrainDit(common) => {
            let cfg = load(&common)?;
            phases::train_dit(&cfg)?;
            println!(
                "transformer checkpoint written to {:?}",
                cfg.out_dir.join("dit.ckpt")
            );
        }
        Command::TrainRefiner(common) => {
            let cfg = load(&common)?;
            phases::train_refiner(&cfg)?;
            println!(
                "refiner checkpoint written to {:?}",
                cfg.out_dir.join("refiner.ckpt")
            );
        }
        Command::Distill(common) => {
            let cfg = load(&common)?;
            phases::distill(&cfg)?;
            println!(
                "student checkpoint written to {:?}",
                cfg.out_dir.join("student.ckpt")
            );
        }
        Command::Rlhf(common) => {
            let cfg = load(&common)?;
            let outcome = phases::rlhf(&cfg)?;
            println!(
                "rlhf done: composite {:.4} -> {:.4} over {} steps",
                outcome.curve.first().copied().unwrap_or(f64::NAN),
                outcome.curve.last().copied().unwrap_or(f64::NAN),
                outcome.curve.len()
            );
        }
        Command::Sample {
            common,
            prompt,
            nfe,
            out,
            image,
        } => {
            let cfg = load(&common)?;
            let req = phases::SampleRequest {
                prompt: &prompt,
                nfe: nfe.unwrap_or(cfg.sample.nfe),
                out: &out,
                image: image.as_deref(),
                seed: cfg.seed,
            };
            let manifest = phases::sample(&cfg, &req)?;
            println!("wrote {} outputs to {:?}", manifest.outputs.len(), out);
        }
        Command::Eval { common, prompts } => {
            let cfg = load(&common)?;
            let (report, _) = phases::eval_phase(&cfg, prompts)?;
            println!(
                "color {:.3}  motion {:.3}  joint {:.3}  i2v first-frame {:.2} dB",
                report.color_accuracy,
                report.motion_accuracy,
                report.joint_accuracy,
                report.i2v_first_frame_psnr
            );
        }
        Command::Merge(common) => {
            let cfg = load(&common)?;
            let manifest = phases::merge(&cfg)?;
            println!("merged checkpoint: {} outputs", manifest.outputs.len());
        }
        Command::BalanceDemo { items, ranks, seed } => {
            let (balanced, rr) = phases::balance_demo(items, ranks, seed)?;
            println!("balanced makespan: {balanced:.6}");
            println!("round-robin makespan: {rr:.6}");
            println!(
                "balanced <= round-robin: {}",
                if balanced <= rr { "yes" } else { "NO" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
