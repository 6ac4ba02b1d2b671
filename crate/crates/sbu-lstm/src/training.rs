//! Mini-batch RMSProp training with MSE loss and patience-based early
//! stopping, plus the finite-difference gradient-check oracle.
//!
//! Training is deterministic: the shuffle order, batch boundaries, and the
//! fixed gradient summation order are all functions of the configured seeds.
//! Early stopping returns the parameters from the best validation epoch, not
//! the last one.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::model::{model_backward, model_forward, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// RMSProp decay of the squared-gradient running mean.
    pub rho: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Calibrated on the default synthetic task: small batches and a
        // patient stop are what let the model reach its noise floor.
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.003,
            rho: 0.9,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0 < self.rho && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// MSE over one prediction: `loss = (1/P) Σ (pred - target)^2`, with its
/// gradient w.r.t. the prediction.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "mse_loss: lengths {} vs {}", pred.len(), target.len());
    let p = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (k, (a, b)) in pred.iter().zip(target).enumerate() {
        let d = a - b;
        loss += d * d;
        grad[k] = 2.0 * d / p;
    }
    (loss / p, grad)
}

/// Running mean of squared gradients, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub accum: Vec<f64>,
}

impl RmsPropState {
    pub fn zeros(num_params: usize) -> Self {
        RmsPropState { accum: vec![0.0; num_params] }
    }
}

/// Elementwise RMSProp step: `s <- rho*s + (1-rho)*g^2`,
/// `theta <- theta - lr*g/(sqrt(s) + eps)`.
pub fn rmsprop_update(params: &mut [f64], grads: &[f64], state: &mut RmsPropState, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "rmsprop: {} params vs {} grads", params.len(), grads.len());
    assert_eq!(params.len(), state.accum.len(), "rmsprop: {} params vs {} state entries", params.len(), state.accum.len());
    for ((theta, &g), s) in params.iter_mut().zip(grads).zip(state.accum.iter_mut()) {
        *s = cfg.rho * *s + (1.0 - cfg.rho) * g * g;
        *theta -= cfg.learning_rate * g / (s.sqrt() + cfg.epsilon);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_mse)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,seconds\n");
        for (i, rec) in self.epochs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, rec.train_mse, rec.val_mse, rec.seconds));
        }
        out
    }
}

fn mean_mse(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate MSE over zero samples".into()));
    }
    let mut total = 0.0;
    for sample in samples {
        let (pred, _) = model_forward(model, &sample.input)?;
        let (loss, _) = mse_loss(&pred, &sample.target);
        total += loss;
    }
    Ok(total / samples.len() as f64)
}

/// Samples whose final window step is masked have no defined prediction and
/// are excluded up front.
fn predictable(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.input.mask.last() == Some(&true)).cloned().collect()
}

/// Trains a copy of `model` and returns the best-validation parameters with
/// the per-epoch history. If the validation split is empty, the training MSE
/// doubles as the early-stopping signal.
pub fn train(model: &Model, splits: &DatasetSplit, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let train_set = predictable(&splits.train);
    let val_set = predictable(&splits.validation);
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let mut model = model.clone();
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }

    let num_params = model.params.num_params();
    let mut state = RmsPropState::zeros(num_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best_flat = model.params.flatten();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_grads = vec![0.0; num_params];
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &train_set[i];
                let (pred, cache) = model_forward(&model, &sample.input)?;
                let (loss, loss_grad) = mse_loss(&pred, &sample.target);
                batch_loss += loss;
                let grads = model_backward(&model, &cache, &loss_grad);
                crate::linalg::add_assign(&mut batch_grads, &grads.flatten());
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.iter_mut() {
                *g *= scale;
            }
            let mut flat = model.params.flatten();
            rmsprop_update(&mut flat, &batch_grads, &mut state, cfg);
            model.params.assign_flat(&flat);
        }
        let train_mse = epoch_loss / train_set.len() as f64;

        let val_mse = if val_set.is_empty() { train_mse } else { mean_mse(&model, &val_set)? };
        if !val_mse.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.epochs.push(EpochRecord {
            train_mse,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });

        if val_mse < best_val {
            best_val = val_mse;
            best_flat = model.params.flatten();
            best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    model.params.assign_flat(&best_flat);
    history.best_epoch = Some(best_epoch);
    Ok((model, history))
}

/// Compares every analytic parameter gradient against a central finite
/// difference of the MSE loss on one sample; returns the max relative error
/// (denominator `max(|a|, |b|, 1e-8)`). Parameters whose analytic and
/// numeric gradients agree within 1e-9 absolutely count as exact: at
/// epsilon = 1e-6 the central difference itself carries roundoff of order
/// machine-epsilon / epsilon, so tighter agreement is unattainable in f64
/// regardless of gradient correctness.
pub fn gradient_check(model: &Model, sample: &Sample, epsilon: f64) -> Result<f64> {
    let (pred, cache) = model_forward(model, &sample.input)?;
    let (_, loss_grad) = mse_loss(&pred, &sample.target);
    let analytic = model_backward(model, &cache, &loss_grad).flatten();

    let mut flat = model.params.flatten();
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for k in 0..flat.len() {
        let original = flat[k];

        flat[k] = original + epsilon;
        probe.params.assign_flat(&flat);
        let (pred, _) = model_forward(&probe, &sample.input)?;
        let (loss_plus, _) = mse_loss(&pred, &sample.target);

        flat[k] = original - epsilon;
        probe.params.assign_flat(&flat);
        let (pred, _) = model_forward(&probe, &sample.input)?;
        let (loss_minus, _) = mse_loss(&pred, &sample.target);

        flat[k] = original;

        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        if (numeric - analytic[k]).abs() < 1e-9 {
            continue;
        }
        let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
