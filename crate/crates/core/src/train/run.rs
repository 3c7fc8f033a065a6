use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{OptimizerState, Schedule};
use crate::blocks::{Mode, Network};
use crate::data::{batches, Augment, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Used by the step schedule only.
    pub step_factor: f64,
    pub step_period: usize,
    pub shuffle: bool,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            step_factor: 0.1,
            step_period: 25,
            shuffle: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        match self.schedule {
            ScheduleKind::Cosine => Schedule::Cosine {
                base_lr: self.lr,
                epochs: self.epochs,
            },
            ScheduleKind::Step => Schedule::Step {
                base_lr: self.lr,
                factor: self.step_factor,
                period: self.step_period,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's training batches, in training mode.
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let test = self.test_acc.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.lr, self.train_loss, self.train_acc, test)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub augment: Augment,
    /// Receives `log.csv` and checkpoints when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| {
                    let v = v.as_f64();
                    if v > b.1 { (i, v) } else { b }
                });
            best.0 == label
        })
        .count()
}

fn check_compatible<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<()> {
    let cfg = net.config();
    let (h, w, c) = ds.image_shape();
    if c != cfg.input_channels {
        return Err(Error::config(format!(
            "dataset has {c} channels, model expects {}",
            cfg.input_channels
        )));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::config(format!(
            "label {bad} does not fit a model with {} classes",
            cfg.num_classes
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("dataset images are empty"));
    }
    Ok(())
}

/// Eval-mode top-1 accuracy and mean cross-entropy. Does not touch the parameters.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    check_compatible(net, ds)?;
    if ds.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let (mut hits, mut loss) = (0usize, 0.0f64);
    for batch in batches(ds, batch_size, None, 0, Augment::NONE)? {
        let mut tape = Tape::new();
        let x = tape.input(batch.images.cast::<T>());
        let logits = net.forward(&mut tape, x, Mode::Eval)?;
        let l = tape.cross_entropy(logits, &batch.labels)?;
        loss += tape.value(l).data()[0].as_f64() * batch.labels.len() as f64;
        hits += correct(tape.value(logits), &batch.labels);
    }
    Ok(Evaluation {
        accuracy: hits as f64 / ds.len() as f64,
        loss: loss / ds.len() as f64,
    })
}

/// Minibatch SGD over `train`, one log row per epoch. `on_epoch` sees every row as it is produced.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    run: &RunOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunLog> {
    cfg.validate()?;
    check_compatible(net, train)?;
    if let Some(t) = test {
        check_compatible(net, t)?;
    }
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut log_file = match &run.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("log.csv"))?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let schedule = cfg.schedule();
    let mut opt = OptimizerState::new(net.store(), cfg.momentum, cfg.weight_decay);
    let mut log = RunLog::default();
    let mut initial_loss = None;
    let mut diverging = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        let shuffle = cfg.shuffle.then_some(run.seed);
        for (b, batch) in batches(train, cfg.batch_size, shuffle, epoch, run.augment)?.enumerate() {
            let mut tape = Tape::new();
            let x = tape.input(batch.images.cast::<T>());
            let logits = net.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                log.aborted = Some(format!("non-finite loss at epoch {} batch {}", epoch + 1, b + 1));
                break 'epochs;
            }
            loss_sum += value * batch.labels.len() as f64;
            hits += correct(tape.value(logits), &batch.labels);
            let grads = tape.backward(loss, net.store().len())?;
            tape.commit_bn_stats(net.store_mut());
            if let Err(e) = opt.sgd_step(net.store_mut(), &grads, lr) {
                match e {
                    Error::Numerical(msg) => {
                        log.aborted = Some(format!("epoch {} batch {}: {msg}", epoch + 1, b + 1));
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let test_acc = match test {
            Some(t) => Some(evaluate(net, t, cfg.batch_size)?.accuracy),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            train_acc: hits as f64 / train.len() as f64,
            test_acc,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", record.csv_row())?;
        }
        on_epoch(&record);
        log.records.push(record);
        if let Some(dir) = &run.out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                Checkpoint::capture(net.store(), Some(&opt), epoch + 1)
                    .save(&dir.join(format!("epoch-{:04}.ckpt", epoch + 1)))?;
            }
        }
        if run.stop_at_train_acc.is_some_and(|t| log.records.last().is_some_and(|r| r.train_acc >= t)) {
            break;
        }
        let initial = *initial_loss.get_or_insert(train_loss);
        diverging = if train_loss > 10.0 * initial { diverging + 1 } else { 0 };
        if diverging >= 3 {
            log.aborted = Some(format!(
                "diverged: train loss {train_loss} above 10x the initial {initial} for 3 epochs (epoch {})",
                epoch + 1
            ));
            break;
        }
    }
    if let Some(dir) = &run.out_dir {
        Checkpoint::capture(net.store(), Some(&opt), log.records.len()).save(&dir.join("final.ckpt"))?;
    }
    Ok(log)
}
