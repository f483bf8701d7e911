use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use krrst_cli::commands::{self, ConfigArgs};

/// Dataset distillation by kernel ridge regression onto self-supervised
/// target features, with transfer, KD and bias experiments.
#[derive(Parser)]
#[command(name = "krrst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file or a run manifest to repeat.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set distill.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn args(&self) -> ConfigArgs {
        ConfigArgs {
            file: self.config.clone(),
            overrides: self.overrides.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic source set and two labeled target tasks.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the self-supervised target model and embed the source set.
    TrainTarget {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Distill the source set onto target-model embeddings.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train a learner on a distilled set or a random source subset.
    Pretrain {
        /// Distillation output, or a target-model directory for the random subset.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune or linear-probe on a target task over several seeds.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained learner; a fresh one when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Distill a task-A teacher into a student through a surrogate set.
    Kd {
        #[arg(long)]
        data: PathBuf,
        /// Distillation output, or a target-model directory for Gaussian inputs.
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the bias of the sampled-inner-solution meta-gradient on the
    /// shipped toy instance, or on an instance given as `--config`.
    BiasDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Write distilled images as PPM/PGM files.
    ExportImages {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Embed images with a trained target model.
    Embed {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Image bundle; the source set when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full transfer comparison in one process.
    Transfer {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> krrst_core::Result<()> {
    match cli.command {
        Command::GenData { common } => commands::gen_data_cmd(&common.args(), &common.out),
        Command::TrainTarget { data, common } => commands::train_target_cmd(&common.args(), &data, &common.out),
        Command::Distill {
            data,
            target,
            resume,
            common,
        } => commands::distill_cmd(&common.args(), &data, &target, resume.as_deref(), &common.out),
        Command::Pretrain { input, data, common } => {
            commands::pretrain_cmd(&common.args(), &input, data.as_deref(), &common.out)
        }
        Command::Finetune { data, model, common } => {
            commands::finetune_cmd(&common.args(), &data, model.as_deref(), &common.out)
        }
        Command::Kd {
            data,
            surrogate,
            teacher,
            common,
        } => commands::kd_cmd(&common.args(), &data, &surrogate, teacher.as_deref(), &common.out),
        Command::BiasDemo { common } => commands::bias_demo_cmd(&common.args(), &common.out),
        Command::ExportImages { input, data, common } => {
            commands::export_images_cmd(&common.args(), &input, &data, &common.out)
        }
        Command::Embed {
            target,
            data,
            input,
            common,
        } => commands::embed_cmd(&common.args(), &target, &data, input.as_deref(), &common.out),
        Command::Transfer { common } => commands::transfer_cmd(&common.args(), &common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KRRST_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
