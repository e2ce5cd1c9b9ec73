//! Memorise eight synthetic images and report the training-set Dice.
//!
//! `cargo run --release -p pstnet --example overfit -- [steps] [lr]`

use std::time::Instant;

use pstnet::data::{synth_samples, SynthParams};
use pstnet::harness::{evaluate, train, TrainOptions};
use pstnet::{ExperimentConfig, MetricOptions};

fn main() -> pstnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(200, |s| s.parse().expect("steps"));
    let mut cfg = ExperimentConfig::toy();
    if let Some(lr) = args.next() {
        cfg.train.lr = lr.parse().expect("lr");
    }
    cfg.train.max_steps = Some(steps);
    cfg.train.epochs = steps;
    cfg.train.decay_every = steps;
    let data = synth_samples(8, 96, 7, &SynthParams::default());

    let start = Instant::now();
    let run = train(&cfg, &data, &TrainOptions::default())?;
    for s in run.steps.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:>4}  loss {:.4}  p3 dice {:.4}  |g| {:.3}",
            s.step, s.loss.total, s.loss.p3.dice, s.grad_norm
        );
    }
    let t = &run.trainer;
    let report = evaluate(&t.net, &t.store, &data, cfg.train.input_size, &cfg.data, &MetricOptions::new())?;
    println!("{}", report.summary());
    println!("{steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
