use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::{Real, Tensor};
use super::{shape_err, Result};

/// Training hyperparameters shared by both networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            batch_size: 16,
            epochs: 200,
            patience: 20,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn volumenet() -> Self {
        Self::default()
    }

    pub fn prednet() -> Self {
        Self { lr_max: 1e-4, lr_min: 1e-6, ..Self::default() }
    }
}

/// Cosine annealing from `lr_max` at epoch 0 down to `lr_min` at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let e = epoch.min(total) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * e / total as f64).cos())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    norm
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return shape_err(format!("mse of {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let n = T::lit(pred.len() as f64);
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n)
}

pub fn mse_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return shape_err(format!("mse of {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let k = T::lit(2.0 / pred.len() as f64);
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Adam with bias correction. Moment buffers follow parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = &mut **p;
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w = *w - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Tracks the best validation loss and signals a stop after `patience`
/// epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    /// Records one epoch's validation loss. Returns `(improved, stop)`.
    pub fn update(&mut self, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = self.epoch;
        }
        self.epoch += 1;
        (improved, self.epoch - 1 - self.best_epoch >= self.patience)
    }
}

/// Index of the epoch at which training stops for a given validation
/// history, or `None` if it runs to the end.
pub fn early_stop(history: &[f64], patience: usize) -> Option<usize> {
    let mut es = EarlyStopping::new(patience);
    history.iter().position(|&l| es.update(l).1)
}
