//! Minimizing the rule loss over aligned partition batches.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch_tuples, PartitionedDataset, Sample, TupleBatch};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rules::{loss_graph, LossBreakdown, RuleSet};
use crate::vae::{ArchitectureConfig, ImageTensor, Mode, Vae};

/// Random stream `stream` of the run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2 << 32;
const STREAM_NOISE: u64 = 3 << 32;
const STREAM_HOLDOUT: u64 = 4 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per partition in each tuple batch.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Tail fraction of every training partition held out for early stopping.
    pub holdout_fraction: f64,
    /// Epochs without holdout improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cap on batches per epoch (0 = no cap).
    pub max_batches_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            holdout_fraction: 0.1,
            patience: 10,
            max_batches_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training batches.
    pub train: LossBreakdown,
    pub holdout: Option<LossBreakdown>,
    /// Mean unnormalized reconstruction error of the training batches.
    pub mean_mse: f64,
    /// Mean unnormalized KL to the prior of the training batches.
    pub mean_klu: f64,
}

impl EpochRecord {
    /// The value early stopping and checkpoint selection track.
    pub fn monitored(&self) -> f64 {
        self.holdout.as_ref().map_or(self.train.total, |h| h.total)
    }
}

pub struct TrainOutcome {
    /// Parameters at the best monitored epoch (initial parameters when no
    /// epoch ran).
    pub model: Vae<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient aborted training.
    pub diverged: Option<Error>,
}

fn gather<'a>(ds: &'a PartitionedDataset, batch: &TupleBatch) -> Vec<&'a ImageTensor> {
    batch
        .indices
        .iter()
        .enumerate()
        .flat_map(|(k, idx)| idx.iter().map(move |&i| &ds.samples(k)[i].image))
        .collect()
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> ArrayD<f32> {
    let data: Vec<f32> = (0..rows * n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(&[rows, n]), data).expect("noise shape")
}

struct StepResult {
    breakdown: LossBreakdown,
    mse: f64,
    klu: f64,
}

/// Evaluates the rule loss on one tuple batch without updating anything.
pub fn evaluate_batch(
    vae: &Vae<f32>,
    rules: &RuleSet,
    images: &[&ImageTensor],
    noise_seed: u64,
    mode: Mode,
) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let b = t.bind(vae.params());
    let x = t.constant(vae.images_to_tensor(images)?);
    let eps = t.constant(noise(&mut stream_rng(noise_seed, STREAM_HOLDOUT), images.len(), vae.latent_size()));
    let (vars, _) = loss_graph(&mut t, &b, vae, rules, x, eps, mode)?;
    t.check_finite()?;
    Ok(vars.breakdown(&t, rules))
}

fn train_step(
    vae: &mut Vae<f32>,
    opt: &mut Adam<f32>,
    rules: &RuleSet,
    images: &[&ImageTensor],
    eps: ArrayD<f32>,
) -> Result<StepResult> {
    let mut t = Tape::new();
    let b = t.bind(vae.params());
    let x = t.constant(vae.images_to_tensor(images)?);
    let eps = t.constant(eps);
    let (vars, stats) = loss_graph(&mut t, &b, vae, rules, x, eps, Mode::Train)?;
    t.check_finite()?;
    let grads = t.backward(vars.total)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged { epoch: 0, reason: format!("non-finite gradient for `{name}`") });
    }
    opt.step(vae.params_mut(), &grads)?;
    vae.update_running_stats(&stats)?;
    let mean = |v| t.value(v).iter().map(|&x| x as f64).sum::<f64>() / t.value(v).len() as f64;
    Ok(StepResult { breakdown: vars.breakdown(&t, rules), mse: mean(vars.rec_raw), klu: mean(vars.klu_raw) })
}

/// Trains a fresh model of architecture `arch` on the partitions of `ds`.
/// `on_epoch` sees every record as it is produced.
pub fn train(
    ds: &PartitionedDataset,
    rules: &RuleSet,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &Vae<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if rules.partitions != ds.len() {
        return Err(Error::Contract(format!("rules cover {} partitions, dataset has {}", rules.partitions, ds.len())));
    }
    let mut init_rng = stream_rng(seed, STREAM_INIT);
    let mut vae = Vae::<f32>::new(arch.clone(), rand::Rng::random(&mut init_rng))?;
    let mut outcome = TrainOutcome { model: vae.clone(), history: Vec::new(), best_epoch: None, stopped_early: false, diverged: None };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }

    let (train_ds, holdout) = ds.clone().split_tail(cfg.holdout_fraction)?;
    if train_ds.min_partition_size() < cfg.batch_size {
        return Err(Error::Config(format!(
            "smallest training partition has {} samples after the holdout, fewer than batch size {}",
            train_ds.min_partition_size(),
            cfg.batch_size
        )));
    }
    let holdout_images: Option<Vec<&ImageTensor>> = (holdout.min_partition_size() > 0).then(|| {
        let m = holdout.min_partition_size();
        (0..holdout.len()).flat_map(|k| holdout.samples(k)[..m].iter().map(|s: &Sample| &s.image)).collect()
    });

    let mut opt = Adam::new(cfg.optimizer)?;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut batches = batch_tuples(&train_ds, cfg.batch_size, rand::Rng::random(&mut stream_rng(seed, STREAM_SHUFFLE + epoch as u64)))?;
        if cfg.max_batches_per_epoch > 0 {
            batches.truncate(cfg.max_batches_per_epoch);
        }
        let mut noise_rng = stream_rng(seed, STREAM_NOISE + epoch as u64);
        let mut parts = Vec::with_capacity(batches.len());
        let (mut mse, mut klu) = (0.0, 0.0);
        for batch in &batches {
            let images = gather(&train_ds, batch);
            let eps = noise(&mut noise_rng, images.len(), vae.latent_size());
            match train_step(&mut vae, &mut opt, rules, &images, eps) {
                Ok(r) => {
                    mse += r.mse;
                    klu += r.klu;
                    parts.push(r.breakdown);
                }
                Err(e @ (Error::NonFinite { .. } | Error::Diverged { .. })) => {
                    let reason = match e {
                        Error::Diverged { reason, .. } => reason,
                        other => other.to_string(),
                    };
                    log::warn!("epoch {epoch}: training diverged: {reason}");
                    outcome.diverged = Some(Error::Diverged { epoch, reason });
                    return Ok(outcome);
                }
                Err(e) => return Err(e),
            }
        }
        let holdout_loss = match &holdout_images {
            Some(imgs) => Some(evaluate_batch(&vae, rules, imgs, seed, Mode::Eval)?),
            None => None,
        };
        let n = parts.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::mean(&parts).unwrap_or_default(),
            holdout: holdout_loss,
            mean_mse: mse / n,
            mean_klu: klu / n,
        };
        log::info!(
            "epoch {epoch}: total {:.4} rec {:.4} reg {:.4} monitored {:.4}",
            record.train.total,
            record.train.recloss,
            record.train.regloss,
            record.monitored()
        );
        on_epoch(&record, &vae);
        let m = record.monitored();
        outcome.history.push(record);
        if m < best {
            best = m;
            since_best = 0;
            outcome.best_epoch = Some(epoch);
            outcome.model = vae.clone();
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    Ok(outcome)
}

/// Writes the loss history as CSV: epoch, train components, total, holdout
/// total, and the raw means.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = history.first() {
        let mut header = vec!["epoch".to_string()];
        header.extend(first.train.columns().into_iter().map(|(k, _)| k));
        header.extend(["holdout_total", "mean_mse", "mean_klu"].map(String::from));
        w.write_record(&header).map_err(|e| Error::format(path, e))?;
    }
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.train.columns().into_iter().map(|(_, v)| format!("{v:.8}")));
        row.push(r.holdout.as_ref().map_or(String::new(), |h| format!("{:.8}", h.total)));
        row.push(format!("{:.8}", r.mean_mse));
        row.push(format!("{:.8}", r.mean_klu));
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
