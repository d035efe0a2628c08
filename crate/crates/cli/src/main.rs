//! `bdl`: train, run, and evaluate the channel-feature pedestrian detector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use bdl_core::train::{PenaltyMode, TrainVariant};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "bdl",
    version,
    about = "Channel-feature CNN pedestrian detection with boosting-like reweighting"
)]
struct Cli {
    /// JSON manifest with every tunable; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainOverrides {
    /// Seed driving sampling, initialization, and shuffling.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    /// Learning rate.
    #[arg(long)]
    eta: Option<f64>,

    /// Penalty on correctly classified samples.
    #[arg(long)]
    alpha_right: Option<f64>,

    /// Penalty on misclassified samples.
    #[arg(long)]
    alpha_wrong: Option<f64>,

    /// Penalty bookkeeping: stateless or cumulative.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PenaltyMode>,

    /// Train with plain backprop (no reweighting).
    #[arg(long)]
    baseline: bool,

    /// Negative windows harvested per image.
    #[arg(long)]
    neg_per_image: Option<usize>,
}

fn parse_mode(s: &str) -> Result<PenaltyMode, String> {
    match s {
        "stateless" => Ok(PenaltyMode::Stateless),
        "cumulative" => Ok(PenaltyMode::Cumulative),
        other => Err(format!("unknown mode {other:?} (stateless|cumulative)")),
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.eta {
            cfg.train.eta = v;
        }
        if let Some(v) = self.alpha_right {
            cfg.train.penalty.alpha_right = v;
        }
        if let Some(v) = self.alpha_wrong {
            cfg.train.penalty.alpha_wrong = v;
        }
        if let Some(v) = self.mode {
            cfg.train.penalty.mode = v;
        }
        if self.baseline {
            cfg.train.variant = TrainVariant::Baseline;
        }
        if let Some(v) = self.neg_per_image {
            cfg.neg_per_image = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pedestrian dataset.
    Synth {
        /// Output dataset directory (images/ + annotations/).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,

        #[arg(long)]
        num_images: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        /// Figures per image (0-2).
        #[arg(long)]
        figures: Option<usize>,

        /// Comma-separated figure heights, e.g. "84,112".
        #[arg(long, value_delimiter = ',')]
        figure_heights: Option<Vec<usize>>,

        #[arg(long)]
        contrast: Option<f64>,

        #[arg(long)]
        noise: Option<f64>,

        #[arg(long)]
        clutter: Option<usize>,
    },

    /// Dump each annotated window's channel stack as a BDLT tensor file.
    ExtractChannels {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,

        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Train a detector on dataset directories.
    Train {
        #[arg(long, value_name = "DIR")]
        train_dir: PathBuf,

        #[arg(long, value_name = "DIR")]
        heldout_dir: PathBuf,

        #[arg(long, value_name = "FILE")]
        model_out: PathBuf,

        /// Per-epoch CSV (epoch, train_mse, heldout_error).
        #[arg(long, value_name = "FILE")]
        report_out: Option<PathBuf>,

        /// Epochs excluded from the stability summary.
        #[arg(long, default_value_t = 0)]
        warmup: usize,

        #[command(flatten)]
        overrides: TrainOverrides,
    },

    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,

        /// Sampled C2/C4 parameters (all FC/S3 parameters are always checked).
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },

    /// Detect pedestrians in an image or a directory of images.
    Detect {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,

        /// A .ppm/.pgm file, a directory of them, or a dataset root.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,

        /// Detections file: `stem x y w h score` per line.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,

        #[arg(long)]
        stride: Option<usize>,

        #[arg(long)]
        scale_step: Option<f64>,

        #[arg(long)]
        score_threshold: Option<f64>,

        #[arg(long)]
        nms_iou: Option<f64>,
    },

    /// Score a detections file against dataset annotations.
    Eval {
        #[arg(long, value_name = "FILE")]
        detections: PathBuf,

        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,

        /// Curve CSV (threshold, fppi, miss_rate).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,

        /// Matching IoU threshold.
        #[arg(long)]
        iou: Option<f64>,
    },

    /// Write every convolution kernel slice as a graymap image.
    DumpKernels {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,

        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Paired boosted-vs-baseline trainings over several seeds.
    Stability {
        /// Summary CSV (seed, variant, stability_score, final_error).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,

        #[arg(long, default_value_t = 7)]
        seeds: usize,

        /// Epochs excluded from the stability score.
        #[arg(long, default_value_t = 10)]
        warmup: usize,

        #[arg(long, default_value_t = 100)]
        train_images: usize,

        #[arg(long, default_value_t = 50)]
        heldout_images: usize,

        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out,
            num_images,
            seed,
            figures,
            figure_heights,
            contrast,
            noise,
            clutter,
        } => {
            if let Some(v) = num_images {
                cfg.synth.num_images = v;
            }
            if let Some(v) = seed {
                cfg.synth.seed = v;
            }
            if let Some(v) = figures {
                cfg.synth.figures_per_image = v;
            }
            if let Some(v) = figure_heights {
                cfg.synth.figure_heights = v;
            }
            if let Some(v) = contrast {
                cfg.synth.contrast = v;
            }
            if let Some(v) = noise {
                cfg.synth.noise = v;
            }
            if let Some(v) = clutter {
                cfg.synth.clutter = v;
            }
            cfg.synth.validate()?;
            commands::run_synth(&cfg, &out)
        }
        Command::ExtractChannels { dataset, out } => {
            commands::run_extract_channels(&cfg, &dataset, &out)
        }
        Command::Train {
            train_dir,
            heldout_dir,
            model_out,
            report_out,
            warmup,
            overrides,
        } => {
            overrides.apply(&mut cfg);
            cfg.validate()?;
            commands::run_train(
                &cfg,
                &train_dir,
                &heldout_dir,
                &model_out,
                report_out.as_deref(),
                warmup,
            )
        }
        Command::Gradcheck { seed, samples } => commands::run_gradcheck(&cfg, seed, samples),
        Command::Detect {
            model,
            input,
            out,
            stride,
            scale_step,
            score_threshold,
            nms_iou,
        } => {
            if let Some(v) = stride {
                cfg.detect.stride = v;
            }
            if let Some(v) = scale_step {
                cfg.detect.scale_step = v;
            }
            if let Some(v) = score_threshold {
                cfg.detect.score_threshold = v;
            }
            if let Some(v) = nms_iou {
                cfg.detect.nms_iou = v;
            }
            cfg.detect.validate()?;
            commands::run_detect(&cfg, &model, &input, &out)
        }
        Command::Eval {
            detections,
            dataset,
            out,
            iou,
        } => {
            if let Some(v) = iou {
                cfg.eval_iou = v;
            }
            cfg.validate()?;
            commands::run_eval(&cfg, &detections, &dataset, out.as_deref())
        }
        Command::DumpKernels { model, out } => commands::run_dump_kernels(&model, &out),
        Command::Stability {
            out,
            seeds,
            warmup,
            train_images,
            heldout_images,
            overrides,
        } => {
            // the experiment defaults to 40 epochs unless --epochs is given
            let epochs = overrides.epochs.unwrap_or(40);
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let args = commands::StabilityArgs {
                seeds,
                epochs,
                warmup,
                train_images,
                heldout_images,
            };
            commands::run_stability(&cfg, out.as_deref(), &args).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
