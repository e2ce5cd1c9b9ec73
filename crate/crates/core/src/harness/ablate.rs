//! Ablation runs: every configured variant trained and scored under every configured seed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::infer::evaluate;
use super::train::{split_folder, train_pairs, TrainOptions};
use crate::config::ExperimentConfig;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{MetricOptions, COLUMNS};
use crate::model::Ablation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub seed: u64,
    /// Held-out means in report column order.
    pub means: [f64; 7],
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Ablation, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn variants(&self) -> Vec<Ablation> {
        let mut v: Vec<Ablation> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant);
            }
        }
        v
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Column means over seeds for one variant.
    pub fn mean(&self, variant: Ablation) -> Option<[f64; 7]> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return None;
        }
        let mut m = [0.0; 7];
        for r in &rows {
            m.iter_mut().zip(r.means).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= rows.len() as f64);
        Some(m)
    }

    /// Seeds on which the full model's mDice is strictly above `variant`'s.
    pub fn wins_over(&self, variant: Ablation) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.row(Ablation::None, s), self.row(variant, s)) {
                (Some(f), Some(v)) => f.means[0] > v.means[0],
                _ => false,
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,label,seed,{},final_loss\n", COLUMNS.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.means.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6}",
                r.variant.name(),
                r.variant.label(),
                r.seed,
                vals.join(","),
                r.final_loss
            );
        }
        s
    }

    /// One row per variant with seed-averaged columns and the full model's win count.
    pub fn table(&self) -> String {
        let n_seeds = self.seeds().len();
        let mut s = format!("{:<18}{}  wins\n", "variant", COLUMNS.map(|c| format!("{c:>8}")).join(""));
        for v in self.variants() {
            let m = self.mean(v).expect("variant has rows");
            let wins = if v == Ablation::None {
                String::from("-")
            } else {
                format!("{}/{}", self.wins_over(v), n_seeds)
            };
            let _ = writeln!(s, "{:<18}{}  {wins}", v.label(), m.map(|x| format!("{x:>8.4}")).join(""));
        }
        s
    }
}

/// Trains every variant in `config.ablate` under every seed and scores it on `test`.
pub fn ablate(
    config: &ExperimentConfig,
    train: &[SamplePair],
    test: &[SamplePair],
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<AblationReport> {
    config.validate()?;
    let test = if test.is_empty() { train } else { test };
    let mut report = AblationReport::default();
    for &seed in &config.ablate.seeds {
        for &variant in &config.ablate.variants {
            let mut cfg = config.clone();
            cfg.train.seed = seed;
            cfg.train.ablation = variant;
            cfg.train.eval_every = 0;
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("{}_seed{seed}", variant.name()))),
                verbose: false,
            };
            let run = train_pairs(&cfg, train, None, &opts)?;
            let r = evaluate(
                &run.trainer.net,
                &run.trainer.store,
                test,
                cfg.train.input_size,
                &cfg.data,
                &MetricOptions::new(),
            )?;
            if verbose {
                eprintln!("seed {seed}  {:<18} mDice {:.4}", variant.label(), r.mdice());
            }
            report.rows.push(AblationRow {
                variant,
                seed,
                means: r.means,
                final_loss: run.epochs.last().map_or(f64::NAN, |e| e.loss),
            });
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("ablation_table.txt");
        std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

pub fn ablate_dir(config: &ExperimentConfig, data_root: &Path, out_dir: &Path, verbose: bool) -> Result<AblationReport> {
    let (train, test) = split_folder(data_root, config)?;
    ablate(config, &train, &test, Some(out_dir), verbose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_samples, SynthParams};

    #[test]
    fn ranks_variants_by_seed() {
        let row = |variant, seed, d| AblationRow {
            variant,
            seed,
            means: [d, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            final_loss: 0.0,
        };
        let report = AblationReport {
            rows: vec![
                row(Ablation::None, 0, 0.8),
                row(Ablation::NoCpm, 0, 0.7),
                row(Ablation::None, 1, 0.6),
                row(Ablation::NoCpm, 1, 0.65),
            ],
        };
        assert_eq!(report.wins_over(Ablation::NoCpm), 1);
        assert!((report.mean(Ablation::None).unwrap()[0] - 0.7).abs() < 1e-12);
        assert!(report.table().contains("w/o CPM"));
        assert_eq!(report.to_csv().lines().count(), 5);
    }

    /// With no optimisation the loss variants share the full model's weights, so they score the same.
    #[test]
    fn loss_variants_without_training_match_the_full_model() {
        let mut cfg = ExperimentConfig::toy();
        cfg.train.input_size = 32;
        cfg.train.epochs = 1;
        cfg.train.max_steps = Some(0);
        cfg.ablate.variants = vec![Ablation::None, Ablation::LossNoWbce, Ablation::LossNoDiceFocal];
        let data = synth_samples(2, 32, 0, &SynthParams::default());
        let r = ablate(&cfg, &data, &data, None, false).unwrap();
        assert_eq!(r.rows[0].means, r.rows[1].means);
        assert_eq!(r.rows[0].means, r.rows[2].means);
    }
}
