use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pstnet::data::synth_dataset;
use pstnet::harness::{ablate_dir, evaluate_checkpoint, predict, train_dir, Checkpoint, TrainOptions};
use pstnet::metrics::{evaluate_dataset, MetricOptions};
use pstnet::{Error, ExperimentConfig, Result};

/// Train, evaluate and run the polyp segmentation network.
///
/// Set PSTNET_DETERMINISTIC=1 to evaluate and predict on a single thread.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on <data>/images and <data>/masks, writing logs and model.ckpt to <out>.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on the held-out split of <data>, or score saved predictions with --preds.
    Eval {
        #[arg(long, required_unless_present = "preds")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
        /// Directory of 8-bit prediction maps to score instead of running a checkpoint.
        #[arg(long)]
        preds: Option<PathBuf>,
        /// Binarise predictions at this probability for Dice and IoU.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write probability maps (and overlays when --gts is given).
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gts: Option<PathBuf>,
    },
    /// Train and score every ablation variant under every configured seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic low-contrast blob dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, quiet } => {
            let cfg = load_config(config.as_ref())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            cfg.save(out.join("config.json"))?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                verbose: !quiet,
            };
            let run = train_dir(&cfg, &data, &opts)?;
            if let Some(r) = &run.report {
                println!("{}", r.summary());
            }
            if let Some(p) = &run.checkpoint_path {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            preds,
            threshold,
        } => {
            let mut opts = MetricOptions::new();
            opts.threshold = threshold;
            let r = match (preds, ckpt) {
                (Some(preds), _) => evaluate_dataset(&preds, &data.join("masks"), &opts)?,
                (None, Some(ckpt)) => evaluate_checkpoint(&Checkpoint::load(&ckpt)?, &data, &opts)?,
                (None, None) => unreachable!("clap requires --ckpt or --preds"),
            };
            r.write(&report)?;
            println!("{}", r.summary());
        }
        Command::Predict { ckpt, images, out, gts } => {
            let written = predict(&Checkpoint::load(&ckpt)?, &images, &out, gts.as_deref())?;
            println!(
                "wrote {} maps and {} overlays to {}",
                written.maps.len(),
                written.overlays.len(),
                out.display()
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(config.as_ref())?;
            let report = ablate_dir(&cfg, &data, &out, true)?;
            print!("{}", report.table());
        }
        Command::Synth { n, size, seed, out } => {
            let split = synth_dataset(n, size, seed, &out)?;
            println!(
                "{} train / {} test images in {}",
                split.train.len(),
                split.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
