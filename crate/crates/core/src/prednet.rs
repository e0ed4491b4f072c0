//! MLP regressor from (feature vector, pose, transfer function, image size)
//! to rendering time.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraPose, RY_LIMIT};
use crate::nn::{
    clip_gradients, cosine_lr, mse, mse_grad, Adam, Checkpoint, EarlyStopping, Layer, Linear, NnError, OptimConfig,
    Selu, Sequential, Tensor,
};
use crate::transfer::TransferFunction;
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum PredNetError {
    #[error("input {what} has length {got}, expected {expected}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("model has no target scaler")]
    MissingScaler,
    #[error("need at least {need} training samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, PredNetError>;

pub const MIN_TRAIN_SAMPLES: usize = 100;
pub const TAIL: [usize; 3] = [128, 64, 32];
pub const HIDDEN: usize = 256;

/// Switchable input blocks, zeroed for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGroup {
    Feature,
    Pose,
    Tf,
    Resolution,
}

impl InputGroup {
    pub const ALL: [InputGroup; 4] = [InputGroup::Feature, InputGroup::Pose, InputGroup::Tf, InputGroup::Resolution];

    pub fn name(self) -> &'static str {
        match self {
            InputGroup::Feature => "feature",
            InputGroup::Pose => "pose",
            InputGroup::Tf => "tf",
            InputGroup::Resolution => "resolution",
        }
    }
}

impl std::str::FromStr for InputGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "feature" => Ok(InputGroup::Feature),
            "pose" => Ok(InputGroup::Pose),
            "tf" | "kappa" => Ok(InputGroup::Tf),
            "resolution" => Ok(InputGroup::Resolution),
            _ => Err(format!("unknown input group {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredNetArch {
    pub feature_dim: usize,
    pub lobes: usize,
    pub n_c256: usize,
}

impl PredNetArch {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + 3 + 3 * self.lobes + 2
    }

    /// Column range of one input group.
    pub fn span(&self, g: InputGroup) -> std::ops::Range<usize> {
        let f = self.feature_dim;
        let k = 3 * self.lobes;
        match g {
            InputGroup::Feature => 0..f,
            InputGroup::Pose => f..f + 3,
            InputGroup::Tf => f + 3..f + 3 + k,
            InputGroup::Resolution => f + 3 + k..f + 3 + k + 2,
        }
    }
}

/// z-scoring of regression targets, fit on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self { mean, std: if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 } }
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unscale(&self, z: f64) -> f64 {
        self.mean + self.std * z
    }
}

/// Per-column z-scoring of the feature-vector inputs, fit on the training
/// split. Encoder outputs are unbounded, unlike the other input groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureScaler {
    pub fn fit(rows: &[TrainRow], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r.x[j] as f64).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let v = rows.iter().map(|r| (r.x[j] as f64 - mean[j]).powi(2)).sum::<f64>() / n;
                if v.sqrt() > 1e-6 { v.sqrt() as f32 } else { 1.0 }
            })
            .collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn apply(&self, x: &mut [f32]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Normalized network input for one query. Pose angles are divided into
/// [0, 1], distance by 4, lobe widths times 5, image sides by 1024.
pub fn encode_input(feature: &[f32], pose: &CameraPose, kappa: &[f32], img: (usize, usize)) -> Vec<f32> {
    let mut x = Vec::with_capacity(feature.len() + 5 + kappa.len());
    x.extend_from_slice(feature);
    x.push((pose.rx / 360.0) as f32);
    x.push(((pose.ry + RY_LIMIT) / (2.0 * RY_LIMIT)) as f32);
    x.push((pose.dz / 4.0) as f32);
    for (i, &k) in kappa.iter().enumerate() {
        x.push(if i % 3 == 1 { k * 5.0 } else { k });
    }
    x.push(img.0 as f32 / 1024.0);
    x.push(img.1 as f32 / 1024.0);
    x
}

/// One training pair: encoded input and raw target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub x: Vec<f32>,
    pub y: f64,
}

pub struct PredNet {
    pub arch: PredNetArch,
    pub mlp: Sequential<f32>,
    pub scaler: Option<TargetScaler>,
    pub feature_scaler: Option<FeatureScaler>,
    pub dropped: Vec<InputGroup>,
}

impl PredNet {
    pub fn new(arch: PredNetArch, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x706e);
        let mut mlp = Sequential::new();
        let mut width = arch.input_dim();
        for out in std::iter::once(HIDDEN).chain(std::iter::repeat_n(HIDDEN, arch.n_c256)).chain(TAIL) {
            mlp.push(Linear::new(width, out, &mut rng));
            mlp.push(Selu::new());
            width = out;
        }
        mlp.push(Linear::new(width, 1, &mut rng));
        Self { arch, mlp, scaler: None, feature_scaler: None, dropped: Vec::new() }
    }

    pub fn with_dropped(mut self, dropped: &[InputGroup]) -> Self {
        let mut d = dropped.to_vec();
        d.sort();
        d.dedup();
        self.dropped = d;
        self
    }

    /// Zeroes the dropped input groups in place.
    pub fn mask(&self, x: &mut [f32]) {
        for &g in &self.dropped {
            x[self.arch.span(g)].fill(0.0);
        }
    }

    pub fn input(&self, feature: &[f32], pose: &CameraPose, tf: &TransferFunction, img: (usize, usize)) -> Result<Vec<f32>> {
        if feature.len() != self.arch.feature_dim {
            return Err(PredNetError::DimMismatch { what: "feature", expected: self.arch.feature_dim, got: feature.len() });
        }
        let kappa = tf.kappa();
        if kappa.len() != 3 * self.arch.lobes {
            return Err(PredNetError::DimMismatch { what: "kappa", expected: 3 * self.arch.lobes, got: kappa.len() });
        }
        Ok(encode_input(feature, pose, &kappa, img))
    }

    /// Predicted time in target units, clamped at zero.
    pub fn predict(&self, feature: &[f32], pose: &CameraPose, tf: &TransferFunction, img: (usize, usize)) -> Result<f64> {
        let scaler = self.scaler.ok_or(PredNetError::MissingScaler)?;
        let x = self.batch(std::iter::once(self.input(feature, pose, tf, img)?.as_slice()))?;
        let z = self.mlp.infer_row(&x)?.data()[0];
        Ok(scaler.unscale(z as f64).max(0.0))
    }

    /// Batched prediction over encoded (unscaled, unmasked) inputs.
    pub fn predict_rows(&self, rows: &[Vec<f32>]) -> Result<Vec<f64>> {
        let scaler = self.scaler.ok_or(PredNetError::MissingScaler)?;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch(rows.iter().map(|r| r.as_slice()))?;
        let y = self.mlp.infer(&x)?;
        Ok(y.data().iter().map(|&z| scaler.unscale(z as f64).max(0.0)).collect())
    }

    fn batch<'a>(&self, rows: impl Iterator<Item = &'a [f32]>) -> Result<Tensor<f32>> {
        let d = self.arch.input_dim();
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            if r.len() != d {
                return Err(PredNetError::DimMismatch { what: "input row", expected: d, got: r.len() });
            }
            let start = data.len();
            data.extend_from_slice(r);
            if let Some(fs) = &self.feature_scaler {
                fs.apply(&mut data[start..start + self.arch.feature_dim]);
            }
            self.mask(&mut data[start..]);
            n += 1;
        }
        Ok(Tensor::new(vec![n, d], data)?)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.add_layer("prednet.", &self.mlp);
    }

    pub fn from_checkpoint(arch: PredNetArch, ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(arch, 0);
        ck.load_layer("prednet.", &mut net.mlp)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Loss in scaled target space (mean squared z-score error).
fn scaled_loss(net: &PredNet, rows: &[TrainRow]) -> Result<f64> {
    let scaler = net.scaler.ok_or(PredNetError::MissingScaler)?;
    let x = net.batch(rows.iter().map(|r| r.x.as_slice()))?;
    let y = net.mlp.infer(&x)?;
    let n = rows.len() as f64;
    Ok(y.data().iter().zip(rows).map(|(&p, r)| (p as f64 - scaler.scale(r.y)).powi(2)).sum::<f64>() / n)
}

/// Fits the scaler on `train`, then minimizes MSE with Adam, cosine
/// annealing, clipping and early stopping (on validation loss when given).
/// Best weights are restored.
pub fn train_prednet(
    train: &[TrainRow],
    val: &[TrainRow],
    arch: PredNetArch,
    dropped: &[InputGroup],
    cfg: &OptimConfig,
    seed: u64,
    log: &mut dyn FnMut(&PredLogRow),
) -> Result<PredNet> {
    if train.len() < MIN_TRAIN_SAMPLES {
        return Err(PredNetError::TooFewSamples { need: MIN_TRAIN_SAMPLES, got: train.len() });
    }
    let mut net = PredNet::new(arch, seed).with_dropped(dropped);
    let scaler = TargetScaler::fit(&train.iter().map(|r| r.y).collect::<Vec<_>>());
    net.scaler = Some(scaler);
    net.feature_scaler = Some(FeatureScaler::fit(train, arch.feature_dim));
    let mut adam = Adam::new(cfg);
    let mut rng = rng_for(seed, 0x7368);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<Vec<Tensor<f32>>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let x = net.batch(idx.iter().map(|&i| train[i].x.as_slice()))?;
            let t = Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| scaler.scale(train[i].y) as f32).collect())?;
            let y = net.mlp.forward(&x, true)?;
            total += mse(&y, &t)? as f64 * idx.len() as f64;
            net.mlp.zero_grad();
            net.mlp.backward(&mse_grad(&y, &t)?)?;
            let mut params = net.mlp.params_mut();
            clip_gradients(&mut params, cfg.clip_norm);
            adam.step(&mut params, lr);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(scaled_loss(&net, val)?) };
        log(&PredLogRow { epoch, train_loss, val_loss, lr });
        let (improved, stop) = stopper.update(val_loss.unwrap_or(train_loss));
        if improved {
            best = Some(net.mlp.state().into_iter().map(|(_, t)| t.clone()).collect());
        }
        if stop {
            break;
        }
    }
    if let Some(snap) = best {
        for ((_, d), s) in net.mlp.state_mut().into_iter().zip(snap) {
            *d = s;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> PredNetArch {
        PredNetArch { feature_dim: 4, lobes: 3, n_c256: 4 }
    }

    #[test]
    fn input_layout() {
        assert_eq!(arch().input_dim(), 4 + 3 + 9 + 2);
        let pose = CameraPose::new(90.0, 0.0, 2.0).unwrap();
        let kappa = [0.5, 0.1, 1.0, 0.2, 0.2, 0.3, 0.9, 0.005, 0.0];
        let x = encode_input(&[1.0, 2.0, 3.0, 4.0], &pose, &kappa, (256, 512));
        assert_eq!(&x[4..7], &[0.25, 0.5, 0.5]);
        assert_eq!(&x[7..10], &[0.5, 0.5, 1.0]);
        assert!((x[14] - 0.025).abs() < 1e-7);
        assert_eq!(&x[16..], &[0.25, 0.5]);
        let a = arch();
        assert_eq!(a.span(InputGroup::Resolution), 16..18);
        assert_eq!(a.span(InputGroup::Tf), 7..16);
    }

    #[test]
    fn layer_stack() {
        let net = PredNet::new(arch(), 0);
        let linear_shapes: Vec<_> = net
            .mlp
            .state()
            .into_iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let expect = [
            vec![256, 18],
            vec![256, 256],
            vec![256, 256],
            vec![256, 256],
            vec![256, 256],
            vec![128, 256],
            vec![64, 128],
            vec![32, 64],
            vec![1, 32],
        ];
        assert_eq!(linear_shapes, expect);
    }

    #[test]
    fn scaler_round_trip() {
        let s = TargetScaler::fit(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.unscale(s.scale(7.0)) - 7.0).abs() < 1e-12);
        assert_eq!(TargetScaler::fit(&[5.0, 5.0]).std, 1.0);
    }

    #[test]
    fn prediction_requires_scaler_and_matching_dims() {
        let mut net = PredNet::new(arch(), 0);
        let pose = CameraPose::new(0.0, 0.0, 2.0).unwrap();
        let tf = TransferFunction::from_kappa(&[0.5, 0.1, 1.0, 0.2, 0.2, 0.3, 0.9, 0.005, 0.0]).unwrap();
        assert!(matches!(net.predict(&[0.0; 4], &pose, &tf, (64, 64)), Err(PredNetError::MissingScaler)));
        net.scaler = Some(TargetScaler { mean: 10.0, std: 2.0 });
        let a = net.predict(&[0.1; 4], &pose, &tf, (64, 64)).unwrap();
        assert_eq!(a, net.predict(&[0.1; 4], &pose, &tf, (64, 64)).unwrap());
        assert!(a >= 0.0);
        assert!(matches!(net.predict(&[0.0; 3], &pose, &tf, (64, 64)), Err(PredNetError::DimMismatch { .. })));
    }

    #[test]
    fn masking_zeroes_groups() {
        let net = PredNet::new(arch(), 0).with_dropped(&[InputGroup::Pose, InputGroup::Resolution]);
        let mut x = vec![1.0; 18];
        net.mask(&mut x);
        assert_eq!(x.iter().filter(|&&v| v == 0.0).count(), 5);
        assert_eq!(&x[4..7], &[0.0; 3]);
    }

    #[test]
    fn too_few_samples() {
        let rows = vec![TrainRow { x: vec![0.0; 18], y: 1.0 }; 10];
        let r = train_prednet(&rows, &[], arch(), &[], &OptimConfig::prednet(), 0, &mut |_| {});
        assert!(matches!(r, Err(PredNetError::TooFewSamples { need: 100, got: 10 })));
    }
}
