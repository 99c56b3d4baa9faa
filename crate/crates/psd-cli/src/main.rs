//! `psd`: sparse coding experiments from the command line. Training,
//! encoding and evaluation are driven by a plain-text config file; flags
//! carry only paths and method selection so experiment records stay
//! diffable.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 internal numerical
//! failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use psd_core::PsdError;

#[derive(Debug)]
pub struct CliError {
    message: String,
    numerical: bool,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        CliError {
            message,
            numerical: false,
        }
    }

    pub fn numerical(message: String) -> Self {
        CliError {
            message,
            numerical: true,
        }
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    pub fn exit_code(&self) -> i32 {
        if self.numerical {
            2
        } else {
            1
        }
    }
}

impl From<PsdError> for CliError {
    fn from(e: PsdError) -> Self {
        match e {
            PsdError::NonFinite(_) => CliError::numerical(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodeMethod {
    /// Single regressor forward pass.
    Approx,
    /// Proximal-gradient minimization of the compound loss.
    Optimal,
    /// Exact basis-pursuit solve by coordinate descent.
    ExactCd,
}

impl EncodeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodeMethod::Approx => "approx",
            EncodeMethod::Optimal => "optimal",
            EncodeMethod::ExactCd => "exact-cd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureMethod {
    /// Single regressor forward pass per window.
    Approx,
    /// Exact basis-pursuit solve per window.
    ExactCd,
}

#[derive(Parser)]
#[command(
    name = "psd",
    version,
    about = "Predictive sparse decomposition: train, encode, evaluate",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on PGM images or a prepared patch tensor
    Train {
        /// Experiment config file (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Output model path (.psd1)
        #[arg(long)]
        output: PathBuf,
        /// Optional training-progress CSV
        #[arg(long)]
        log: Option<PathBuf>,
        /// Emit one progress row per this many samples
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        /// Input PGM images, or a single .tnsr patch tensor
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Extract (and by default normalize) random patches from PGM images
    Patches {
        #[arg(long)]
        config: PathBuf,
        /// Output patch tensor (.tnsr)
        #[arg(long)]
        output: PathBuf,
        /// Skip per-patch normalization
        #[arg(long, default_value_t = false)]
        raw: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Encode a patch tensor with a trained model
    Encode {
        /// Model path (.psd1)
        #[arg(long)]
        model: PathBuf,
        /// Patch tensor (.tnsr)
        #[arg(long)]
        patches: PathBuf,
        /// Inference method
        #[arg(long, value_enum)]
        method: EncodeMethod,
        /// Config file (required for optimal and exact-cd)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output code tensor (.tnsr)
        #[arg(long)]
        output: PathBuf,
    },
    /// Measurements over codes, models and images
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Recognition preprocessing: resize, normalize globally and locally,
    /// pad to a fixed canvas
    Preprocess {
        /// Input PGM image
        #[arg(long)]
        input: PathBuf,
        /// Output image tensor (.tnsr)
        #[arg(long)]
        output: PathBuf,
        /// Longest side after resize
        #[arg(long, default_value_t = psd_core::data::DEFAULT_LONG_SIDE)]
        long_side: usize,
        /// Output canvas side
        #[arg(long, default_value_t = psd_core::data::DEFAULT_PAD_TO)]
        pad_to: usize,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Average SNR between aligned code tensors
    Snr {
        /// Reference code tensor (.tnsr)
        #[arg(long)]
        reference: PathBuf,
        /// Approximation code tensor (.tnsr)
        #[arg(long)]
        approximation: PathBuf,
        /// Report CSV path (JSON mirror written alongside)
        #[arg(long)]
        output: PathBuf,
    },
    /// Measured sparsity (average l1 norm) of a code tensor
    Sparsity {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sign-transition stability over a directory of per-frame code tensors
    Stability {
        /// Directory of frame tensors (sorted by file name)
        #[arg(long)]
        frames: PathBuf,
        /// Codes come from the exact solver: threshold 1e-12
        #[arg(long, default_value_t = false, conflicts_with = "target_zero_fraction")]
        exact: bool,
        /// Calibrate the zero threshold to this pooled zero fraction
        #[arg(long)]
        target_zero_fraction: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Wall-clock comparison of approximate and exact inference
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Also time compound-loss inference
        #[arg(long, default_value_t = false)]
        include_optimal: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Convolutional features: encode, rectify, average-pool (optionally
    /// train/test a linear classifier on the result)
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        method: FeatureMethod,
        /// Config file (required for exact-cd)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Window side applied convolutionally
        #[arg(long, default_value_t = 9)]
        k: usize,
        /// Pooled feature-map height
        #[arg(long, default_value_t = 30)]
        out_h: usize,
        /// Pooled feature-map width
        #[arg(long, default_value_t = 30)]
        out_w: usize,
        /// Output feature tensor (.tnsr)
        #[arg(long)]
        output: PathBuf,
        /// Class-id file, one integer per input image
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Fraction of images used for classifier training
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Classifier L2 penalty
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        /// Classifier training epochs
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Split/classifier seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Classifier accuracy report CSV
        #[arg(long)]
        report: Option<PathBuf>,
        /// Input images (.pgm, or rank-2 .tnsr from `psd preprocess`)
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            output,
            log,
            log_every,
            inputs,
        } => commands::cmd_train(&config, &inputs, &output, log.as_deref(), log_every),
        Command::Patches {
            config,
            output,
            raw,
            images,
        } => commands::cmd_patches(&config, &images, &output, raw),
        Command::Encode {
            model,
            patches,
            method,
            config,
            output,
        } => commands::cmd_encode(&model, &patches, method, config.as_deref(), &output),
        Command::Eval { command } => match command {
            EvalCommand::Snr {
                reference,
                approximation,
                output,
            } => commands::cmd_eval_snr(&reference, &approximation, &output),
            EvalCommand::Sparsity { codes, output } => commands::cmd_eval_sparsity(&codes, &output),
            EvalCommand::Stability {
                frames,
                exact,
                target_zero_fraction,
                output,
            } => commands::cmd_eval_stability(&frames, exact, target_zero_fraction, &output),
            EvalCommand::Bench {
                model,
                patches,
                config,
                repetitions,
                include_optimal,
                output,
            } => commands::cmd_eval_bench(
                &model,
                &patches,
                &config,
                repetitions,
                include_optimal,
                &output,
            ),
            EvalCommand::Features {
                model,
                method,
                config,
                k,
                out_h,
                out_w,
                output,
                labels,
                train_fraction,
                l2,
                epochs,
                seed,
                report,
                images,
            } => commands::cmd_eval_features(
                &model,
                &images,
                method,
                config.as_deref(),
                k,
                out_h,
                out_w,
                &output,
                labels.as_deref(),
                train_fraction,
                l2,
                epochs,
                seed,
                report.as_deref(),
            ),
        },
        Command::Preprocess {
            input,
            output,
            long_side,
            pad_to,
        } => commands::cmd_preprocess(&input, &output, long_side, pad_to),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
