use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use jointtok::Error;

mod cli;

/// Joint image/video tokenizer: training, coding and generation at desk scale.
#[derive(Parser, Debug)]
#[command(name = "jointtok", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a VQ tokenizer through the progressive schedule.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the VQ bottleneck with a Gaussian head and fine-tune.
    FinetuneKl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize a tensor container into a token stream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// class id stored in the stream header
        #[arg(long)]
        cond: Option<u32>,
    },
    /// Decode a token stream back to pixels.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Class-conditional autoregressive sampling.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// trained token model; trained on the synthetic corpus when absent
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// sample only this class (default: cycle through all)
        #[arg(long)]
        class: Option<usize>,
    },
    /// Continue a clip by sampling future token slots.
    PredictFrames {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// clip container; the first synthetic clip when absent
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        prefix_slots: usize,
        #[arg(long, default_value_t = 2)]
        future_slots: usize,
        /// slide the context window to generate past the LM context
        #[arg(long)]
        slide: bool,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Train a latent diffusion model on tokenizer latents and sample from it.
    Diffuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// trained denoiser; trained on the synthetic corpus when absent
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Reconstruction metrics over the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericFault { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match args.cmd {
        Command::Train { config, out } => cli::train(config.as_deref(), &out),
        Command::FinetuneKl { checkpoint, config, out } => cli::finetune_kl(&checkpoint, config.as_deref(), &out),
        Command::Encode {
            checkpoint,
            input,
            output,
            cond,
        } => cli::encode(&checkpoint, &input, &output, cond),
        Command::Decode {
            checkpoint,
            input,
            output,
        } => cli::decode(&checkpoint, &input, &output),
        Command::Generate {
            checkpoint,
            lm,
            config,
            out,
            class,
        } => cli::generate(&checkpoint, lm.as_deref(), config.as_deref(), &out, class),
        Command::PredictFrames {
            checkpoint,
            lm,
            config,
            out,
            input,
            prefix_slots,
            future_slots,
            slide,
            class,
        } => cli::predict_frames(
            &checkpoint,
            lm.as_deref(),
            config.as_deref(),
            &out,
            input.as_deref(),
            prefix_slots,
            future_slots,
            slide,
            class,
        ),
        Command::Diffuse {
            checkpoint,
            denoiser,
            config,
            out,
            class,
        } => cli::diffuse(&checkpoint, denoiser.as_deref(), config.as_deref(), &out, class),
        Command::Eval { checkpoint, config, out } => cli::eval(&checkpoint, config.as_deref(), out.as_deref()),
        Command::Selftest => cli::selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
