//! Adam training with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Gradients, Mlp, Workspace};
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Validation loss must drop by more than this to count as an improvement.
const MIN_IMPROVEMENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Clamped to the training split size.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 128,
            patience: 500,
            validation_fraction: 0.2,
            max_epochs: 50_000,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were returned; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Training-split MSE of the returned parameters.
    pub final_training_loss: f64,
    pub loss_history: Vec<EpochLoss>,
}

/// Shuffles once with the configured seed and holds out the first
/// `ceil(fraction * n)` samples for validation. Returns `(train, validation)`.
pub fn split_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let n = data.len();
    let n_val = (cfg.validation_fraction * n as f64).ceil() as usize;
    if n_val == 0 {
        return Err(Error::EmptySplit {
            total: n,
            which: "validation",
        });
    }
    if n_val >= n {
        return Err(Error::EmptySplit {
            total: n,
            which: "training",
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    order.shuffle(&mut rng);
    Ok((data.subset(&order[n_val..]), data.subset(&order[..n_val])))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let mut k = 0;
        for (params, g) in net.param_slices_mut().zip(grads.slices()) {
            for (p, &gi) in params.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                k += 1;
            }
        }
    }
}

/// Trains a copy of `net` and returns the parameters with the lowest
/// validation loss seen.
pub fn train(net: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainReport)> {
    let (train_set, val_set) = split_dataset(data, cfg)?;
    net.check_input(&data.inputs[0])?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));
    let batch_size = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut current = net.clone();
    let mut adam = Adam::new(current.parameter_count(), cfg.learning_rate);
    let mut ws = Workspace::new(&current);
    let mut grads = Gradients::zeros_like(&current);

    let mut best = current.clone();
    let mut best_loss = current.mse(&val_set)?;
    if !best_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut epoch = 0;

    while epoch < cfg.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            grads.clear();
            let loss = ws.accumulate(&current, &train_set, chunk.iter().copied(), &mut grads);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam.update(&mut current, &grads);
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = current.mse(&val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(EpochLoss {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
        });
        if val_loss < best_loss - MIN_IMPROVEMENT {
            best_loss = val_loss;
            best = current.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let final_training_loss = best.mse(&train_set)?;
    Ok((
        best,
        TrainReport {
            epochs_run: epoch,
            best_epoch,
            best_validation_loss: best_loss,
            final_training_loss,
            loss_history: history,
        },
    ))
}
