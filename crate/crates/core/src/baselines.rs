//! Comparison predictors: sampled-mean, online history average and a
//! low-resolution proxy with a linear correction.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::raycast::{RenderConfig, RenderError, Renderer};
use crate::transfer::TransferFunction;
use crate::util::rng_for;
use crate::volume::{downsample, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no tasks")]
    Empty,
    #[error("low-resolution proxy has not been fitted")]
    UnfittedModel,
    #[error("least-squares fit needs at least two distinct low-res times")]
    DegenerateFit,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

pub const BRUDER_FRACTION: f64 = 0.15;
pub const ONLINE_WINDOW: usize = 3;
pub const LOWRES_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruderEstimate {
    /// Indices of the tasks whose ground truth was consumed.
    pub sampled: Vec<usize>,
    /// Constant prediction for every task.
    pub prediction: f64,
}

/// Renders `ceil(fraction * n)` randomly chosen tasks and predicts their
/// mean time for all tasks.
pub fn bruder_mean(times: &[f64], fraction: f64, seed: u64) -> Result<BruderEstimate> {
    let n = times.len();
    if n == 0 {
        return Err(BaselineError::Empty);
    }
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sampled = sample(&mut rng_for(seed, 0x6272), n, k).into_vec();
    sampled.sort_unstable();
    let prediction = sampled.iter().map(|&i| times[i]).sum::<f64>() / k as f64;
    Ok(BruderEstimate { sampled, prediction })
}

/// Mean of the last `window` frame times; short histories are padded at
/// the front by repeating the first frame.
pub fn online_learn(history: &[f64], window: usize) -> Result<f64> {
    let first = *history.first().ok_or(BaselineError::Empty)?;
    let window = window.max(1);
    let pad = window.saturating_sub(history.len());
    let tail = &history[history.len().saturating_sub(window)..];
    Ok((first * pad as f64 + tail.iter().sum::<f64>()) / window as f64)
}

/// Predictions for frames `1..n` of a sequence, each from the frames before it.
pub fn online_predictions(series: &[f64], window: usize) -> Vec<f64> {
    (1..series.len()).map(|i| online_learn(&series[..i], window).expect("non-empty prefix")).collect()
}

/// `t_high ≈ a * t_low + b`, fitted by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowResFit {
    pub a: f64,
    pub b: f64,
}

impl LowResFit {
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        let n = pairs.len() as f64;
        if pairs.len() < 2 {
            return Err(BaselineError::DegenerateFit);
        }
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= f64::EPSILON * mx.abs().max(1.0) {
            return Err(BaselineError::DegenerateFit);
        }
        let a = sxy / sxx;
        Ok(Self { a, b: my - a * mx })
    }

    pub fn predict(&self, t_low: f64) -> f64 {
        self.a * t_low + self.b
    }
}

/// Low-resolution proxy predictor; unfitted until [`LowResProxy::fit`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LowResProxy {
    pub fit: Option<LowResFit>,
}

impl LowResProxy {
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        Ok(Self { fit: Some(LowResFit::fit(pairs)?) })
    }

    pub fn predict(&self, t_low: f64) -> Result<f64> {
        Ok(self.fit.ok_or(BaselineError::UnfittedModel)?.predict(t_low))
    }
}

/// Renderer over the volume resampled to `LOWRES_DIM³` (or left alone when
/// it is already that small).
pub fn lowres_renderer(v: &Volume) -> Result<Renderer> {
    let dims = v.dims().map(|d| d.min(LOWRES_DIM));
    let low = if dims == v.dims() { v.clone() } else { downsample(v, dims)? };
    Ok(Renderer::new(&low))
}

/// Deterministic cost of the same frame on the low-resolution volume. The
/// step size is scaled so the ray crosses the same fraction of the volume
/// per step.
pub fn lowres_cost(
    low: &Renderer,
    full_dims: [usize; 3],
    tf: &TransferFunction,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<f64> {
    let scale = low.dims()[0] as f32 / full_dims[0] as f32;
    let step = (cfg.step_size * scale).clamp(crate::raycast::DELTA_MIN, crate::raycast::DELTA_MAX);
    let cfg = cfg.clone().with_step(step);
    Ok(low.cost(tf, pose, &cfg)?.samples_total() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bruder_sample_size_and_constant() {
        let times: Vec<f64> = (1..=20).map(|x| x as f64).collect();
        let e = bruder_mean(&times, 0.15, 1).unwrap();
        assert_eq!(e.sampled.len(), 3);
        let expected = e.sampled.iter().map(|&i| times[i]).sum::<f64>() / 3.0;
        assert_eq!(e.prediction, expected);
        assert_eq!(bruder_mean(&times, 1.0, 9).unwrap().prediction, 10.5);
        assert_eq!(bruder_mean(&[7.0; 5], 0.15, 3).unwrap().prediction, 7.0);
        assert!(matches!(bruder_mean(&[], 0.15, 0), Err(BaselineError::Empty)));
        // 0.15 * 100 is 15.000000000000002 in floating point.
        assert_eq!(bruder_mean(&vec![1.0; 100], 0.15, 0).unwrap().sampled.len(), 15);
    }

    #[test]
    fn online_window() {
        assert_eq!(online_learn(&[10.0, 20.0, 30.0], 3).unwrap(), 20.0);
        assert_eq!(online_learn(&[1.0, 10.0, 20.0, 30.0], 3).unwrap(), 20.0);
        assert_eq!(online_learn(&[10.0], 3).unwrap(), 10.0);
        assert_eq!(online_learn(&[10.0, 40.0], 3).unwrap(), 20.0);
        assert!(online_learn(&[], 3).is_err());
    }

    #[test]
    fn online_lags_a_step_change() {
        let series: Vec<f64> = (0..10).map(|i| if i < 5 { 10.0 } else { 100.0 }).collect();
        let p = online_predictions(&series, 3);
        // p[i] predicts frame i + 1.
        assert_eq!(p[4], 10.0);
        assert_eq!(p[5], 40.0);
        assert_eq!(p[6], 70.0);
        assert_eq!(p[7], 100.0);
    }

    #[test]
    fn ols_exact_line() {
        let f = LowResFit::fit(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap();
        assert!((f.a - 2.0).abs() < 1e-12 && f.b.abs() < 1e-12);
        assert!(LowResFit::fit(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(matches!(LowResProxy::default().predict(1.0), Err(BaselineError::UnfittedModel)));
    }
}
