//! `sgdm`: data generation, training, editing and evaluation.
//!
//! Exit codes: 0 on success, 1 for usage, parse and I/O errors, 2 when a
//! run detects a broken invariant (for example a background mismatch).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sgdm", version, about = "Mask-constrained diffusion editing on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (PPM images, PGM masks, JSONL manifest).
    GenData(GenDataArgs),
    /// Train a denoiser on a generated dataset.
    Train(TrainArgs),
    /// Edit one image inside its mask.
    Edit(EditArgs),
    /// Invert and regenerate with the source prompt and no guidance.
    Reconstruct(ReconstructArgs),
    /// Run inversion only and dump the latent trajectory.
    Invert(InvertArgs),
    /// Benchmark constraint modes on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Inputs shared by the commands that work on one image.
#[derive(Args, Debug)]
pub struct ImageArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Source image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Object mask (binary PGM). Inferred from the image when omitted.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Source prompt as "inside words|outside words".
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    /// Edit prompt as "inside words|outside words".
    #[arg(long)]
    pub edit: String,
    #[arg(long)]
    pub wg: Option<f64>,
    /// Attention re-weighting factor for the changed words.
    #[arg(long)]
    pub reweight: Option<f64>,
    /// Edit inside and outside together, without copying the background.
    #[arg(long)]
    pub simultaneous: bool,
    /// Also write per-step diagnostics as JSON lines.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    /// Where to write the latents (same container format as checkpoints).
    #[arg(long)]
    pub dump_trajectory: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated constraint modes.
    #[arg(long, default_value = "none,token_only,soft,hard")]
    pub modes: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub wg: Option<f64>,
    #[arg(long)]
    pub reweight: Option<f64>,
    /// Evaluate only the first N manifest entries.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub report: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Edit(a) => commands::edit(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Invert(a) => commands::invert(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e
                .chain()
                .filter_map(|c| c.downcast_ref::<sgdm_core::Error>())
                .any(|c| c.is_invariant_violation());
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}
