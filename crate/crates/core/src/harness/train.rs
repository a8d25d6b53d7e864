//! Seeded mini-batch training.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{dice_coef, BinaryMask};
use crate::model::{predict, Network};
use crate::tensor::{ParamStore, Sgd, Tape};
use crate::{Rng, Scalar};

pub const CSV_HEADER: &str = "epoch,loss,dice_wt,dice_tc,dice_et";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean per-sample total loss over the epoch.
    pub loss: f64,
    /// Mean validation Dice per region.
    pub dice: [f64; 3],
}

impl EpochRow {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

pub struct TrainOutcome<T> {
    pub net: Network,
    /// Parameters of the epoch with the best mean validation Dice.
    pub best: ParamStore<T>,
    /// Parameters after the last step.
    pub last: ParamStore<T>,
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Mean Dice per region of thresholded predictions.
pub fn mean_dice<T: Scalar>(net: &Network, store: &ParamStore<T>, samples: &[SliceSample]) -> Result<[f64; 3]> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let mut acc = [0.0; 3];
    for s in samples {
        let probs = predict(net, store, &s.image_as::<T>())?;
        for r in 0..3 {
            acc[r] += dice_coef(&BinaryMask::from_probs(&probs[r]), &s.masks[r])?;
        }
    }
    Ok(acc.map(|a| a / samples.len() as f64))
}

/// One optimizer step on `batch`, returning the summed per-sample loss.
pub fn train_step<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    opt: &mut Sgd,
    cfg: &RunConfig,
    batch: &[&SliceSample],
) -> Result<f64> {
    store.zero_grad();
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, store, &s.image_as::<T>())?;
        let terms = total_loss(&mut tape, &fwd.probs, &s.targets::<T>(), cfg.optim.bce)?;
        total += tape.value(terms.total).item()?.wide();
        let scaled = tape.scale(terms.total, 1.0 / batch.len() as f64);
        tape.backward(scaled, store)?;
    }
    opt.step(store)?;
    Ok(total)
}

/// Trains from a fresh initialisation; validation Dice is computed after every epoch
/// (on the training slices when `val` is empty).
pub fn train<T: Scalar>(cfg: &RunConfig, train: &[SliceSample], val: &[SliceSample]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split has zero samples".into()));
    }
    if val.is_empty() {
        log::warn!("no validation slices; model selection uses training Dice");
    }
    let score_on = if val.is_empty() { train } else { val };
    let (net, mut store) = Network::new::<T>(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum)?.with_clip_norm(cfg.optim.clip_norm)?;
    let shuffle = Rng::new(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut steps = 0;
    let max_steps = cfg.optim.max_steps.unwrap_or(usize::MAX);
    for epoch in 1..=cfg.optim.epochs {
        if steps >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle.fork(epoch as u64).shuffle(&mut order);
        let mut loss = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.optim.batch_size) {
            if steps >= max_steps {
                break;
            }
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &train[i]).collect();
            loss += train_step(&net, &mut store, &mut opt, cfg, &batch)?;
            seen += batch.len();
            steps += 1;
        }
        if !loss.is_finite() {
            return Err(Error::Input(format!("training diverged at epoch {epoch} (loss {loss})")));
        }
        let dice = mean_dice(&net, &store, score_on)?;
        let row = EpochRow { epoch, loss: loss / seen.max(1) as f64, dice };
        log::info!("epoch {epoch}: loss {:.5} dice {:.4} {:.4} {:.4}", row.loss, dice[0], dice[1], dice[2]);
        if best.as_ref().map_or(true, |(m, _, _)| row.mean_dice() > *m) {
            best = Some((row.mean_dice(), epoch, store.clone()));
        }
        history.push(row);
    }
    let (_, best_epoch, best_store) = best.ok_or_else(|| Error::Config("training ran zero epochs".into()))?;
    Ok(TrainOutcome { net, best: best_store, last: store, history, best_epoch, steps })
}

/// Per-epoch CSV; the final row repeats the best epoch's metrics under `best`.
pub fn history_csv(history: &[EpochRow], best_epoch: usize) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let fmt = |out: &mut String, tag: &str, r: &EpochRow| {
        let _ = writeln!(out, "{tag},{},{},{},{}", r.loss, r.dice[0], r.dice[1], r.dice[2]);
    };
    for r in history {
        fmt(&mut out, &r.epoch.to_string(), r);
    }
    if let Some(r) = history.iter().find(|r| r.epoch == best_epoch) {
        fmt(&mut out, &format!("best:{best_epoch}"), r);
    }
    out
}
