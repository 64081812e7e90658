//! Adam, polynomial learning-rate decay, and the bag-batched training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, ParamStore, Tape};
use crate::model::{DropoutContext, Model, PreparedBag};
use crate::seeding::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param}; step rejected")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss on bag {index} ({head}, {tail})")]
    NonFiniteLoss {
        index: usize,
        head: String,
        tail: String,
    },
    #[error("bag {index} has no training label")]
    Unlabelled { index: usize },
    #[error("no training bags")]
    NoBags,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Adam moments for every parameter element.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).shape()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update from the gradients accumulated in `params`.
///
/// All gradients are checked before anything is written, so a rejected step
/// leaves both the parameters and the moments untouched.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if let Some(id) = params.ids().find(|&id| !params.grad(id).is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            param: params.name(id).to_string(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let (value, grad) = params.value_and_grad_mut(id);
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        for (((w, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Polynomial decay from `lr_initial` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        lr_at(step, self)
    }
}

pub fn lr_at(step: u64, schedule: &LrSchedule) -> f64 {
    if schedule.total_steps == 0 {
        return schedule.lr_min;
    }
    let progress = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    schedule.lr_min
        + (schedule.lr_initial - schedule.lr_min) * (1.0 - progress).powf(schedule.power)
}

/// Where training stands inside the epoch/batch grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    pub epoch: u64,
    /// Next batch to run within `epoch`.
    pub batch: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub epoch: u64,
    pub steps: u64,
    pub bags: usize,
    pub sentences: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    /// Fraction of sentences removed by the threshold gate.
    pub gated_fraction: f64,
    /// Bags whose gate kept only the fallback sentence.
    pub fallback_bags: usize,
    /// Bags whose gold probability was clamped in the loss.
    pub clamped_bags: usize,
    pub final_lr: f64,
}

struct BagOutcome {
    loss: f64,
    grads: Gradients,
    sentences: usize,
    filtered: usize,
    fallback: bool,
    clamped: bool,
}

/// Owns the model and optimizer state for a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub cursor: Cursor,
}

pub fn batches_per_epoch(bags: usize, batch_size: usize) -> u64 {
    bags.div_ceil(batch_size) as u64
}

impl Trainer {
    /// A fresh trainer whose schedule spans `config.epochs` passes over
    /// `num_bags` bags.
    pub fn new(model: Model, seed: u64, num_bags: usize) -> Self {
        let cfg = &model.config;
        let total_steps = cfg.epochs as u64 * batches_per_epoch(num_bags, cfg.batch_size);
        let schedule = LrSchedule {
            lr_initial: cfg.lr_initial,
            lr_min: cfg.lr_min,
            total_steps,
            power: cfg.decay_power,
        };
        let adam = AdamState::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Trainer {
            model,
            adam,
            schedule,
            seed,
            cursor: Cursor::default(),
        }
    }

    /// Bag order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn permutation(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::rng(self.seed, &[stream::SHUFFLE, epoch]));
        order
    }

    fn run_bag(&self, bag: &PreparedBag, epoch: u64) -> Result<BagOutcome, TrainError> {
        if bag.label.is_none() {
            return Err(TrainError::Unlabelled { index: bag.index });
        }
        let mut tape = Tape::new(&self.model.params);
        let dropout = DropoutContext {
            seed: self.seed,
            epoch,
        };
        let (loss, fwd, clamped) = self.model.bag_loss(&mut tape, bag, Some(dropout))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                index: bag.index,
                head: bag.head.clone(),
                tail: bag.tail.clone(),
            });
        }
        let grads = tape.backward(loss)?;
        Ok(BagOutcome {
            loss: value,
            grads,
            sentences: bag.sentences.len(),
            filtered: fwd.gate.filtered(),
            fallback: fwd.gate.fallback,
            clamped,
        })
    }

    /// Runs one batch: forward/backward per bag (in parallel), then gradients
    /// are summed in batch order, averaged, and applied with one Adam step.
    fn step(
        &mut self,
        bags: &[PreparedBag],
        batch: &[usize],
        epoch: u64,
        report: &mut EpochReport,
    ) -> Result<(), TrainError> {
        let outcomes = batch
            .par_iter()
            .map(|&i| self.run_bag(&bags[i], epoch))
            .collect::<Vec<_>>();
        let params = &mut self.model.params;
        params.zero_grads();
        for outcome in outcomes {
            let o = outcome?;
            params.accumulate(&o.grads);
            report.mean_loss += o.loss;
            report.bags += 1;
            report.gated_fraction += o.filtered as f64;
            report.fallback_bags += usize::from(o.fallback);
            report.clamped_bags += usize::from(o.clamped);
            report.sentences += o.sentences;
        }
        params.scale_grads(1.0 / batch.len() as f64);
        let norm = params
            .ids()
            .map(|id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let lr = self.schedule.at(self.adam.t);
        adam_step(params, &mut self.adam, lr)?;
        report.steps += 1;
        report.mean_grad_norm += norm;
        report.max_grad_norm = report.max_grad_norm.max(norm);
        report.final_lr = lr;
        Ok(())
    }

    /// Runs until the end of the current epoch or until `max_steps` updates
    /// have been applied in total, whichever comes first.
    pub fn train_until(
        &mut self,
        bags: &[PreparedBag],
        max_steps: Option<u64>,
    ) -> Result<EpochReport, TrainError> {
        if bags.is_empty() {
            return Err(TrainError::NoBags);
        }
        let epoch = self.cursor.epoch;
        let order = self.permutation(epoch, bags.len());
        let batches: Vec<&[usize]> = order.chunks(self.model.config.batch_size).collect();
        let mut report = EpochReport {
            epoch,
            ..EpochReport::default()
        };
        while (self.cursor.batch as usize) < batches.len() {
            if max_steps.is_some_and(|m| self.adam.t >= m) {
                break;
            }
            let batch = batches[self.cursor.batch as usize];
            self.step(bags, batch, epoch, &mut report)?;
            self.cursor.batch += 1;
        }
        if self.cursor.batch as usize >= batches.len() {
            self.cursor = Cursor {
                epoch: epoch + 1,
                batch: 0,
            };
        }
        if report.bags > 0 {
            report.mean_loss /= report.bags as f64;
            report.gated_fraction /= report.sentences.max(1) as f64;
        }
        if report.steps > 0 {
            report.mean_grad_norm /= report.steps as f64;
        }
        Ok(report)
    }

    /// One full pass over `bags` (or the remainder of a resumed epoch).
    pub fn train_epoch(&mut self, bags: &[PreparedBag]) -> Result<EpochReport, TrainError> {
        self.train_until(bags, None)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit<F: FnMut(&EpochReport)>(
        &mut self,
        bags: &[PreparedBag],
        mut on_epoch: F,
    ) -> Result<(), TrainError> {
        while self.cursor.epoch < self.model.config.epochs as u64 {
            let report = self.train_epoch(bags)?;
            on_epoch(&report);
        }
        Ok(())
    }
}
