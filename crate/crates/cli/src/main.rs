use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use pumlc_cli::commands::{
    cmd_eval, cmd_gradcheck, cmd_mask, cmd_split, cmd_sweep, cmd_synth, cmd_train, EvalArgs,
    GradcheckArgs, MaskArgs, SplitArgs, SweepArgs, SynthArgs, TrainArgs,
};
use pumlc_cli::errors::CliResult;
use pumlc_core::datasets::MaskSetting;

#[derive(Parser)]
#[command(
    name = "pumlc",
    version,
    about = "Multi-label classification from positive labels only: synthesis, masking, training, evaluation, gradient checks, and sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Vectors,
    Images,
}

impl KindArg {
    fn as_str(self) -> &'static str {
        match self {
            KindArg::Vectors => "vectors",
            KindArg::Images => "images",
        }
    }
}

/// pn keeps every label, partial keeps a fraction of all labels, pu
/// keeps a fraction of positives and drops every negative.
#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Pn,
    Partial,
    Pu,
}

impl From<SettingArg> for MaskSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Pn => MaskSetting::FullPn,
            SettingArg::Partial => MaskSetting::PartialPn,
            SettingArg::Pu => MaskSetting::PositiveOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    Synth {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        categories: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Feature dimension (vectors kind)
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Cluster separation; noise scales as its inverse (vectors kind)
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        /// Image side length, at least 16 (images kind)
        #[arg(long, default_value_t = 16)]
        hw: usize,
        #[arg(long)]
        force: bool,
    },
    /// Split one dataset into head/tail halves sharing the same concepts
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        /// Samples in the head half (e.g. the training portion)
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out_head: PathBuf,
        #[arg(long)]
        out_tail: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Hide labels of a fully annotated dataset
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        setting: SettingArg,
        /// Fraction of eligible labels kept, in (0, 1]
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for the config's eval_every cadence
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed (precedence: flag > PUMLC_SEED > config)
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint directory written by the same config
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint every N epochs (0 = final only)
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decision threshold on sigmoid probabilities
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        force: bool,
    },
    /// Compare every operation's and loss's gradients against finite differences
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
        /// Random evaluation points per component
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 12021)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Grid sweep over gamma, alpha, mask ratio, and seed
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Unmasked dataset; every cell applies its own mask
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth {
            kind,
            n,
            categories,
            seed,
            out,
            dim,
            separation,
            hw,
            force,
        } => cmd_synth(&SynthArgs {
            kind: kind.as_str().to_string(),
            n,
            categories,
            seed,
            out,
            dim,
            separation,
            hw,
            force,
        }),
        Command::Split {
            input,
            head,
            out_head,
            out_tail,
            force,
        } => cmd_split(&SplitArgs {
            input,
            head,
            out_head,
            out_tail,
            force,
        }),
        Command::Mask {
            input,
            setting,
            ratio,
            seed,
            out,
            force,
        } => cmd_mask(&MaskArgs {
            input,
            setting: setting.into(),
            ratio,
            seed,
            out,
            force,
        }),
        Command::Train {
            config,
            data,
            eval,
            out,
            seed,
            resume,
            checkpoint_every,
            force,
        } => cmd_train(&TrainArgs {
            config,
            data,
            eval,
            out,
            seed,
            resume,
            checkpoint_every,
            force,
        }),
        Command::Eval {
            data,
            checkpoint,
            out,
            threshold,
            force,
        } => cmd_eval(&EvalArgs {
            data,
            checkpoint,
            out,
            threshold,
            force,
        }),
        Command::Gradcheck {
            out,
            points,
            seed,
            force,
        } => cmd_gradcheck(&GradcheckArgs {
            out,
            points,
            seed,
            force,
        }),
        Command::Sweep {
            config,
            data,
            eval,
            out,
            gammas,
            alphas,
            ratios,
            seeds,
            force,
        } => cmd_sweep(&SweepArgs {
            config,
            data,
            eval,
            out,
            gammas,
            alphas,
            ratios,
            seeds,
            force,
        }),
    }
}

fn main() -> ExitCode {
    // Usage mistakes are validation failures (exit 1); clap's default
    // exit code of 2 is reserved for numeric failures here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
