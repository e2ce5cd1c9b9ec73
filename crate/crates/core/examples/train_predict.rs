//! End to end on disk: synthesise a dataset, train the toy model, reload the checkpoint and
//! write probability maps with colour overlays.
//!
//! `cargo run --release -p pstnet --example train_predict -- <work_dir> [epochs]`

use std::path::PathBuf;

use pstnet::data::synth_dataset;
use pstnet::harness::{evaluate_checkpoint, predict, train_dir, Checkpoint, TrainOptions};
use pstnet::{ExperimentConfig, MetricOptions};

fn main() -> pstnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "run".into()));
    let mut cfg = ExperimentConfig::toy();
    cfg.train.epochs = args.next().map_or(10, |s| s.parse().expect("epochs"));
    cfg.train.decay_every = cfg.train.epochs;

    let data = work.join("data");
    synth_dataset(60, cfg.train.input_size, 11, &data)?;
    let opts = TrainOptions {
        out_dir: Some(work.join("train")),
        verbose: true,
    };
    let run = train_dir(&cfg, &data, &opts)?;
    let ckpt_path = run.checkpoint_path.expect("checkpoint written when out_dir is set");

    let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
    println!("held-out: {}", evaluate_checkpoint(&ckpt, &data, &MetricOptions::new())?.summary());
    let out = predict(&ckpt, &data.join("images"), &work.join("preds"), Some(&data.join("masks")))?;
    println!("{} maps, overlays under {}", out.maps.len(), work.join("preds/overlays").display());
    Ok(())
}
