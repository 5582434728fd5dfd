//! Pieces shared by both training stages: mini-batch sampling, batch
//! assembly and per-iteration logs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::DomainSample;
use crate::error::{Error, Result};
use crate::losses::dice_score;
use crate::mask::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One row of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// CSV with columns `iteration,<loss_name>,dice`.
    pub fn write_csv(&self, path: &Path, loss_name: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["iteration", loss_name, "dice"]).map_err(csv_error)?;
        for r in &self.records {
            w.write_record([r.iteration.to_string(), r.loss.to_string(), r.dice.to_string()]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over the first and last `k` iterations.
    pub fn loss_window(&self, k: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let k = k.clamp(1, n);
        let mean = |rs: &[TrainRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[n - k..])))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Endless stream of mini-batches drawn from reshuffled epochs.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0, batch: batch.clamp(1, n.max(1)) }
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `(B, 1, H, W)` images and targets for the chosen samples.
pub fn assemble<T: Scalar>(samples: &[DomainSample<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = &samples[idx[0]];
    let (h, w) = first.mask.dims();
    let mut x = Vec::with_capacity(idx.len() * h * w);
    let mut y = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        let s = &samples[i];
        s.image.expect_shape(&[h, w])?;
        x.extend_from_slice(s.image.data());
        y.extend(s.mask.data().iter().map(|&m| if m { T::one() } else { T::zero() }));
    }
    Ok((Tensor::from_vec(&[idx.len(), 1, h, w], x)?, Tensor::from_vec(&[idx.len(), 1, h, w], y)?))
}

/// Mean Dice of thresholded logits `(B, 1, H, W)` against targets.
pub fn batch_dice<T: Scalar>(logits: &Tensor<T>, masks: &[&SegmentationMask], threshold: f64) -> f64 {
    let (b, _, h, w) = logits.dims4();
    let total: f64 = (0..b)
        .map(|i| {
            let pred = mask_from_logits(logits.item(i), h, w, threshold);
            dice_score(&pred, masks[i]).expect("matching shapes")
        })
        .sum();
    total / b.max(1) as f64
}

/// Foreground where `sigmoid(logit) > threshold`; a tie is background.
pub fn mask_from_logits<T: Scalar>(logits: &[T], h: usize, w: usize, threshold: f64) -> SegmentationMask {
    SegmentationMask::from_fn(h, w, |r, c| {
        let z = logits[r * w + c].f64();
        1.0 / (1.0 + (-z).exp()) > threshold
    })
}

pub(crate) fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iteration, loss })
    }
}
