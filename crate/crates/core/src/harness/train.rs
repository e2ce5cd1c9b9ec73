//! Training loop: shuffled epochs, optional multi-scale batches, deep-supervised loss, clipped
//! AdamW steps, CSV logs, a JSON run manifest and the final checkpoint.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pstnet_autograd::{apply_updates, Ctx, Graph, Mode, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::infer::evaluate;
use super::optim::{clip_grad_norm, AdamW};
use crate::config::ExperimentConfig;
use crate::data::{load_folder, multiscale_batch, preprocess, Batch, SamplePair, ScaleSampler, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{pixel_weights, total_loss, LossBreakdown, LossTerms};
use crate::metrics::{MetricOptions, MetricReport};
use crate::model::PstNet;

/// Offset separating the data-order stream from the initialisation seed.
const ORDER_STREAM: u64 = 0x5eed_0da7a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub size: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub loss: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub wbce: f64,
    pub dice: f64,
    pub focal: f64,
    pub eval_mdice: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    const HEADER: &'static str = "epoch,lr,steps,loss,p1,p2,p3,p3_wbce,p3_dice,p3_focal,eval_mdice,seconds";

    fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.2}",
            self.epoch,
            self.lr,
            self.steps,
            self.loss,
            self.p1,
            self.p2,
            self.p3,
            self.wbce,
            self.dice,
            self.focal,
            self.eval_mdice.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.seconds
        )
    }
}

impl StepLog {
    const HEADER: &'static str = "epoch,step,lr,size,loss,p1,p2,p3,grad_norm,clipped_norm";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.step,
            self.lr,
            self.size,
            self.loss.total,
            self.loss.p1.total,
            self.loss.p2.total,
            self.loss.p3.total,
            self.grad_norm,
            self.clipped_norm
        )
    }
}

/// Model, parameters, optimiser and data-order stream of one run.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub net: PstNet,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
    scales: ScaleSampler,
    terms: LossTerms,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (net, store) = PstNet::build::<f32>(&config.model, config.train.ablation, config.train.seed)?;
        let optimizer = AdamW::new(store.len(), config.train.weight_decay);
        Ok(Trainer {
            config: config.clone(),
            net,
            store,
            optimizer,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed ^ ORDER_STREAM),
            scales: ScaleSampler::new(&config.data.scales),
            terms: LossTerms::for_ablation(config.train.ablation),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<f32>) -> Result<Self> {
        let net = ck.model()?;
        let optimizer = ck
            .optimizer
            .unwrap_or_else(|| AdamW::new(ck.store.len(), ck.config.train.weight_decay));
        Ok(Trainer {
            net,
            optimizer,
            epoch: ck.epoch,
            step: ck.step,
            rng: ck.rng.restore()?,
            scales: ScaleSampler::new(&ck.config.data.scales),
            terms: LossTerms::for_ablation(ck.config.train.ablation),
            store: ck.store,
            config: ck.config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(self.config.train.seed ^ ORDER_STREAM, &self.rng),
            store: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.train.schedule().at(self.epoch)
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.train.epochs || self.config.train.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimiser step on `batch` (already at network resolution and normalised).
    pub fn step(&mut self, batch: &Batch<f32>) -> Result<StepLog> {
        let lr = self.lr();
        let non_finite = |ids: &[String]| Error::NonFiniteLoss {
            epoch: self.epoch,
            step: self.step,
            ids: ids.to_vec(),
        };
        let weights = pixel_weights(&batch.masks, self.config.loss.boundary_weight_k, self.config.loss.boundary_kernel)?;
        let (mut grads, updates, loss) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store, Mode::Train);
            let out = self.net.forward(&ctx, ctx.constant(batch.images.clone()))?;
            let finite = |v: Var<'_, f32>| v.value().iter().all(|x| x.is_finite());
            if ![out.p1, out.p2, out.p3].into_iter().all(finite) {
                return Err(non_finite(&batch.ids));
            }
            let (loss, breakdown) = total_loss([out.p1, out.p2, out.p3], &batch.masks, &weights, &self.config.loss, self.terms)?;
            if !breakdown.total.is_finite() {
                return Err(non_finite(&batch.ids));
            }
            let grads = g.backward(loss);
            (ctx.param_grads(&grads), ctx.take_updates(), breakdown)
        };
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(non_finite(&batch.ids));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.train.grad_clip);
        let clipped_norm = super::optim::grad_norm(&grads);
        self.optimizer.step(&mut self.store, &grads, lr);
        apply_updates(&mut self.store, updates);
        self.step += 1;
        Ok(StepLog {
            epoch: self.epoch,
            step: self.step,
            lr,
            size: batch.spatial().0,
            loss,
            grad_norm,
            clipped_norm,
        })
    }

    /// One shuffled pass over `train` (preprocessed pairs); stops early at `max_steps`.
    pub fn run_epoch(&mut self, train: &[SamplePair]) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let multiple = self.config.model.encoder.required_multiple();
        let mut logs = Vec::new();
        for idx in order.chunks(self.config.train.batch_size) {
            if self.config.train.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let pairs: Vec<&SamplePair> = idx.iter().map(|&i| &train[i]).collect();
            let mut batch = Batch::from_pairs(&pairs)?;
            if self.config.train.multiscale {
                let scale = self.scales.sample(&mut self.rng);
                batch = multiscale_batch(&batch, scale, multiple)?;
            }
            logs.push(self.step(&batch)?);
        }
        self.epoch += 1;
        Ok(logs)
    }
}

fn summarize(epoch: usize, lr: f64, steps: &[StepLog], eval_mdice: Option<f64>, seconds: f64) -> EpochLog {
    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepLog) -> f64| steps.iter().map(f).sum::<f64>() / n;
    EpochLog {
        epoch,
        lr,
        steps: steps.len(),
        loss: mean(&|s| s.loss.total),
        p1: mean(&|s| s.loss.p1.total),
        p2: mean(&|s| s.loss.p2.total),
        p3: mean(&|s| s.loss.p3.total),
        wbce: mean(&|s| s.loss.p3.wbce),
        dice: mean(&|s| s.loss.p3.dice),
        focal: mean(&|s| s.loss.p3.focal),
        eval_mdice,
        seconds,
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `log.csv`, `steps.csv`, `manifest.json` and `model.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Held-out report after the final epoch, when an evaluation set was given.
    pub report: Option<MetricReport>,
    pub checkpoint_path: Option<PathBuf>,
}

struct RunFiles {
    epochs: File,
    steps: File,
}

fn create(path: &Path, header: &str) -> Result<File> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

fn append(f: &mut File, dir: &Path, line: &str) -> Result<()> {
    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    train_ids: Vec<&'a str>,
    eval_ids: Vec<&'a str>,
    epochs_completed: usize,
    steps: usize,
    final_loss: Option<f64>,
    eval_means: Option<[f64; 7]>,
    checkpoint: Option<String>,
    error: Option<String>,
}

/// Trains on raw pairs; `eval` (raw pairs) is scored every `eval_every` epochs and at the end.
pub fn train_pairs(config: &ExperimentConfig, train: &[SamplePair], eval: Option<&[SamplePair]>, opts: &TrainOptions) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config)?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let size = config.train.input_size;
    let prepared: Vec<SamplePair> = train.iter().map(|p| preprocess(p, size, &config.data)).collect();
    let mut files = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(RunFiles {
                epochs: create(&dir.join("log.csv"), EpochLog::HEADER)?,
                steps: create(&dir.join("steps.csv"), StepLog::HEADER)?,
            })
        }
        None => None,
    };
    let metric_opts = MetricOptions::new();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut report = None;
    let mut failure = None;
    while !trainer.done() {
        let start = Instant::now();
        let lr = trainer.lr();
        let logs = match trainer.run_epoch(&prepared) {
            Ok(l) => l,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let epoch = trainer.epoch;
        let every = config.train.eval_every;
        let due = trainer.done() || (every > 0 && epoch % every == 0);
        let eval_mdice = match eval {
            Some(set) if due && !set.is_empty() => {
                let r = evaluate(&trainer.net, &trainer.store, set, size, &config.data, &metric_opts)?;
                let m = r.mdice();
                report = Some(r);
                Some(m)
            }
            _ => None,
        };
        let summary = summarize(epoch, lr, &logs, eval_mdice, start.elapsed().as_secs_f64());
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.1e}  loss {:.4}  dice {:.4}{}",
                epoch,
                lr,
                summary.loss,
                summary.dice,
                eval_mdice.map(|m| format!("  eval mDice {m:.4}")).unwrap_or_default()
            );
        }
        if let (Some(f), Some(dir)) = (files.as_mut(), opts.out_dir.as_ref()) {
            for s in &logs {
                append(&mut f.steps, dir, &s.csv_row())?;
            }
            append(&mut f.epochs, dir, &summary.csv_row())?;
        }
        steps.extend(logs);
        epochs.push(summary);
    }

    let mut checkpoint_path = None;
    if let Some(dir) = &opts.out_dir {
        if let Some(Error::NonFiniteLoss { ids, epoch, step }) = &failure {
            let dump = serde_json::json!({ "epoch": epoch, "step": step, "batch_ids": ids });
            let path = dir.join("nonfinite_batch.json");
            std::fs::write(&path, dump.to_string()).map_err(|e| Error::io(&path, e))?;
        } else if failure.is_none() {
            let path = dir.join("model.ckpt");
            trainer.checkpoint().save(&path)?;
            checkpoint_path = Some(path);
        }
        let manifest = Manifest {
            config,
            train_ids: train.iter().map(|p| p.id.as_str()).collect(),
            eval_ids: eval.unwrap_or_default().iter().map(|p| p.id.as_str()).collect(),
            epochs_completed: trainer.epoch,
            steps: trainer.step,
            final_loss: epochs.last().map(|e| e.loss),
            eval_means: report.as_ref().map(|r| r.means),
            checkpoint: checkpoint_path.as_ref().map(|p| p.display().to_string()),
            error: failure.as_ref().map(|e| e.to_string()),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainRun {
        trainer,
        epochs,
        steps,
        report,
        checkpoint_path,
    })
}

/// Splits a dataset folder by its `train.txt` / `test.txt` (all pairs train when absent).
pub fn split_folder(root: &Path, config: &ExperimentConfig) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let pairs = load_folder(root, &config.data)?;
    match SplitSpec::read(root)? {
        Some(split) => {
            let train = if split.train.is_empty() {
                pairs.clone()
            } else {
                SplitSpec::select(&pairs, &split.train)?
            };
            Ok((train, SplitSpec::select(&pairs, &split.test)?))
        }
        None => Ok((pairs, Vec::new())),
    }
}

pub fn train_dir(config: &ExperimentConfig, data_root: &Path, opts: &TrainOptions) -> Result<TrainRun> {
    let (train, test) = split_folder(data_root, config)?;
    train_pairs(config, &train, (!test.is_empty()).then_some(test.as_slice()), opts)
}

/// Same entry point for callers that already hold the pairs.
pub fn train(config: &ExperimentConfig, train: &[SamplePair], opts: &TrainOptions) -> Result<TrainRun> {
    train_pairs(config, train, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_samples, SynthParams};

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::toy();
        c.train.input_size = 32;
        c.train.batch_size = 2;
        c.train.epochs = 2;
        c
    }

    #[test]
    fn runs_are_reproducible_and_clip() {
        let data = synth_samples(3, 32, 5, &SynthParams::default());
        let a = train(&tiny(), &data, &TrainOptions::default()).unwrap();
        let b = train(&tiny(), &data, &TrainOptions::default()).unwrap();
        assert_eq!(a.steps.len(), 4);
        let losses = |r: &TrainRun| r.steps.iter().map(|s| s.loss.total).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.steps.iter().all(|s| s.clipped_norm <= 0.5 + 1e-6));
    }

    #[test]
    fn max_steps_and_multiscale() {
        let mut c = tiny();
        c.train.max_steps = Some(3);
        c.train.multiscale = true;
        c.train.input_size = 64;
        c.data.scales = vec![0.5, 1.0];
        let data = synth_samples(4, 64, 1, &SynthParams::default());
        let run = train(&c, &data, &TrainOptions::default()).unwrap();
        assert_eq!(run.trainer.step, 3);
        assert!(run.steps.iter().all(|s| s.size == 32 || s.size == 64));
    }

    #[test]
    fn checkpoint_resume_continues_identically() {
        let data: Vec<SamplePair> = synth_samples(4, 32, 2, &SynthParams::default())
            .iter()
            .map(|p| preprocess(p, 32, &tiny().data))
            .collect();
        let mut full = Trainer::new(&tiny()).unwrap();
        full.run_epoch(&data).unwrap();
        let ck = Checkpoint::<f32>::from_bytes(&full.checkpoint().to_bytes()).unwrap();
        let second = full.run_epoch(&data).unwrap();
        let mut resumed = Trainer::from_checkpoint(ck).unwrap();
        let again = resumed.run_epoch(&data).unwrap();
        assert_eq!(second, again);
    }

    #[test]
    fn writes_logs_manifest_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_samples(3, 32, 5, &SynthParams::default());
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        };
        let run = train_pairs(&tiny(), &data[..2], Some(&data[2..]), &opts).unwrap();
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with(EpochLog::HEADER));
        assert!(run.report.is_some());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["steps"], 2);
        Checkpoint::<f32>::load(run.checkpoint_path.unwrap()).unwrap().model().unwrap();
    }
}
