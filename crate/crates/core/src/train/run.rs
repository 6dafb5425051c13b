//! The epoch loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::dataset::Sample;
use super::loss::{bce_loss, correct_pixels};
use super::optim::{adam_step, AdamState};
use crate::net::{Mode, Network};
use crate::{Error, Result, Tensor};

/// Training and validation samples for one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_acc >= r.val_acc => Some(b),
                _ => Some(r),
            })
    }
}

fn batch_of(samples: &[Sample], ids: &[usize]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = ids.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor> = ids.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Loss and pixel accuracy over `samples` in inference mode.
pub fn evaluate(net: &Network, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let ids: Vec<usize> = (0..samples.len()).collect();
    let (mut loss, mut correct, mut pixels) = (0.0, 0usize, 0usize);
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = batch_of(samples, chunk)?;
        let pred = net.infer(&x)?;
        let (l, _) = bce_loss(&pred, &y)?;
        loss += l * y.len() as f64;
        correct += correct_pixels(&pred, &y)?;
        pixels += y.len();
    }
    Ok((loss / pixels as f64, correct as f64 / pixels as f64))
}

/// Writes `<stem>.cpw` and a `<stem>.txt` sidecar holding the epoch and optimizer step.
pub fn write_checkpoint(net: &Network, dir: &Path, stem: &str, epoch: usize, step: u64) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.cpw"));
    net.to_weights().write(&path)?;
    let sidecar = dir.join(format!("{stem}.txt"));
    std::fs::write(&sidecar, format!("epoch = {epoch}\nstep = {step}\n")).map_err(|e| Error::io(&sidecar, e))?;
    Ok(path)
}

/// Trains `net` with Adam on mean binary cross-entropy.
///
/// Each epoch shuffles the training set with a ChaCha stream keyed by `cfg.seed`,
/// runs mini-batches of `batch_size` (the last one may be short), then scores the
/// validation set in inference mode. With a checkpoint directory, weights are
/// written every `checkpoint_every` epochs as `epoch_NNNN.cpw`, to `best.cpw`
/// whenever validation accuracy improves, and the history to `history.csv`.
pub fn train(
    mut net: Network,
    data: &TrainData,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Network, TrainingHistory)> {
    let opt = cfg.optimizer;
    opt.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation sets, got {} and {}",
            data.train.len(),
            data.validation.len()
        )));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let mut history = TrainingHistory::default();
    let mut best_acc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=opt.epochs {
        net.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            let (x, y) = batch_of(&data.train, chunk)?;
            let pass = net.forward_train(&x)?;
            let pred = pass.output()?;
            let (loss, seed) = bce_loss(pred, &y).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            loss_sum += loss * y.len() as f64;
            correct += correct_pixels(pred, &y)?;
            pixels += y.len();
            let grads = pass.backward(seed)?;
            adam_step(&mut net.params_mut().trainable, &grads, &mut state, &opt).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            net.apply_batch_stats(&pass)?;
        }
        net.set_mode(Mode::Inference);
        let (val_loss, val_acc) = evaluate(&net, &data.validation, opt.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / pixels as f64,
            train_acc: correct as f64 / pixels as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}/{}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            opt.epochs,
            record.train_loss,
            record.train_acc,
            val_loss,
            val_acc
        );
        history.records.push(record);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                write_checkpoint(&net, dir, &format!("epoch_{epoch:04}"), epoch, state.t)?;
            }
            if val_acc > best_acc {
                write_checkpoint(&net, dir, "best", epoch, state.t)?;
            }
            history.write_csv(dir.join("history.csv"))?;
        }
        best_acc = best_acc.max(val_acc);
    }
    Ok((net, history))
}
