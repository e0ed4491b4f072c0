//! Convolutional autoencoder that compresses a volume into a short feature
//! vector. Only the encoder is needed after training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    clip_gradients, cosine_lr, mse, mse_grad, Adam, BatchNorm, Checkpoint, Conv3d, ConvTranspose3d, EarlyStopping,
    Layer, Linear, NnError, OptimConfig, Real, Reshape, Selu, Sequential, Tanh, Tensor,
};
use crate::util::rng_for;
use crate::volume::{downsample, normalize_to_signed_unit, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum VolumeNetError {
    #[error("expected a {expected}^3 volume, got {got:?}")]
    WrongResolution { expected: usize, got: [usize; 3] },
    #[error("expected a feature vector of length {expected}, got {got}")]
    WrongDim { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("bad architecture descriptor {0:?}")]
    BadDescriptor(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, VolumeNetError>;

pub const MAX_CHANNELS: usize = 256;

/// `<res>^3F<F>`; e.g. `32^3F4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeNetArch {
    pub input_res: usize,
    pub feature_dim: usize,
}

impl Default for VolumeNetArch {
    fn default() -> Self {
        Self { input_res: 32, feature_dim: 4 }
    }
}

impl VolumeNetArch {
    pub fn new(input_res: usize, feature_dim: usize) -> Result<Self> {
        if ![32, 64, 128].contains(&input_res) || feature_dim == 0 {
            return Err(VolumeNetError::BadDescriptor(format!("{input_res}^3F{feature_dim}")));
        }
        Ok(Self { input_res, feature_dim })
    }

    pub fn blocks(&self) -> usize {
        self.input_res.trailing_zeros() as usize - 1
    }

    /// Output channels of each encoder block.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.blocks()).map(|i| (16 << i).min(MAX_CHANNELS)).collect()
    }

    pub fn last_channels(&self) -> usize {
        *self.channels().last().expect("at least one block")
    }
}

impl fmt::Display for VolumeNetArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^3F{}", self.input_res, self.feature_dim)
    }
}

impl FromStr for VolumeNetArch {
    type Err = VolumeNetError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || VolumeNetError::BadDescriptor(s.to_string());
        let t = s.trim().replace('³', "^3");
        let (res, feat) = t.split_once("^3F").ok_or_else(bad)?;
        let res = res.parse().map_err(|_| bad())?;
        let feat = feat.parse().map_err(|_| bad())?;
        Self::new(res, feat).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub volume_id: String,
    pub values: Vec<f32>,
}

/// Resamples to `res³` and maps values onto [-1, 1].
pub fn prepare_volume(v: &Volume, res: usize) -> Result<Tensor<f32>> {
    let v = if v.dims() == [res; 3] { v.clone() } else { downsample(v, [res; 3])? };
    let v = normalize_to_signed_unit(&v);
    Ok(Tensor::new(vec![1, res, res, res], v.values().to_vec())?)
}

pub struct VolumeNet<T: Real = f32> {
    pub arch: VolumeNetArch,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

impl<T: Real> VolumeNet<T> {
    pub fn new(arch: VolumeNetArch, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x766e);
        let chans = arch.channels();
        let last = arch.last_channels();
        let mut encoder = Sequential::new();
        let mut c_in = 1;
        for &c in &chans {
            encoder.push(Conv3d::new(c_in, c, 4, 2, 1, &mut rng));
            encoder.push(BatchNorm::new(c));
            encoder.push(Selu::new());
            c_in = c;
        }
        encoder.push(Reshape::new(&[last * 8]));
        encoder.push(Linear::new(last * 8, arch.feature_dim, &mut rng));

        let mut decoder = Sequential::new();
        decoder.push(Linear::new(arch.feature_dim, last * 8, &mut rng));
        decoder.push(Selu::new());
        decoder.push(Reshape::new(&[last, 2, 2, 2]));
        for i in (0..chans.len()).rev() {
            let out = if i == 0 { 1 } else { chans[i - 1] };
            decoder.push(ConvTranspose3d::new(chans[i], out, 4, 2, 1, 0, &mut rng));
            if i == 0 {
                decoder.push(Tanh::new());
            } else {
                decoder.push(BatchNorm::new(out));
                decoder.push(Selu::new());
            }
        }
        Self { arch, encoder, decoder }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let r = self.arch.input_res;
        match x.shape() {
            [_, 1, a, b, c] if [*a, *b, *c] == [r; 3] => Ok(()),
            s => {
                let got = if s.len() == 5 { [s[2], s[3], s[4]] } else { [0; 3] };
                Err(VolumeNetError::WrongResolution { expected: r, got })
            }
        }
    }

    /// Batched eval-mode encoding of `[N, 1, r, r, r]` into `[N, F]`.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encoder.infer(x)?)
    }

    pub fn decode_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match z.shape() {
            [_, f] if *f == self.arch.feature_dim => Ok(self.decoder.infer(z)?),
            s => Err(VolumeNetError::WrongDim { expected: self.arch.feature_dim, got: s.last().copied().unwrap_or(0) }),
        }
    }

    /// Encodes one prepared `[1, r, r, r]` volume.
    pub fn encode(&self, v: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.encode_batch(&as_batch(v)?)?.into_data())
    }

    /// Decodes one feature vector into a `[1, r, r, r]` volume.
    pub fn decode(&self, z: &[T]) -> Result<Tensor<T>> {
        if z.len() != self.arch.feature_dim {
            return Err(VolumeNetError::WrongDim { expected: self.arch.feature_dim, got: z.len() });
        }
        let r = self.arch.input_res;
        let y = self.decode_batch(&Tensor::new(vec![1, z.len()], z.to_vec())?)?;
        Ok(y.reshape(&[1, r, r, r])?)
    }

    pub fn reconstruct(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(v)?)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.add_layer("volumenet.encoder.", &self.encoder);
        ck.add_layer("volumenet.decoder.", &self.decoder);
    }

    pub fn from_checkpoint(arch: VolumeNetArch, ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(arch, 0);
        ck.load_layer("volumenet.encoder.", &mut net.encoder)?;
        ck.load_layer("volumenet.decoder.", &mut net.decoder)?;
        Ok(net)
    }

    /// Training step on one batch; returns the batch reconstruction MSE.
    fn step(&mut self, x: &Tensor<T>, adam: &mut Adam<T>, lr: f64, clip: f64) -> Result<f64> {
        let z = self.encoder.forward(x, true)?;
        let y = self.decoder.forward(&z, true)?;
        let loss = mse(&y, x)?.to_f64().unwrap_or(f64::NAN);
        let g = mse_grad(&y, x)?;
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        let gz = self.decoder.backward(&g)?;
        self.encoder.backward(&gz)?;
        let mut params: Vec<_> = self.encoder.params_mut();
        params.extend(self.decoder.params_mut());
        clip_gradients(&mut params, clip);
        adam.step(&mut params, lr);
        Ok(loss)
    }

    /// Resets batch-norm running statistics to the population statistics of
    /// `data` under the current weights.
    pub fn recalibrate_bn(&mut self, data: &[Tensor<T>], batch: usize) -> Result<()> {
        let batches = make_batches(data.len(), batch.max(2));
        for (k, idx) in batches.iter().enumerate() {
            let momentum = 1.0 / (k as f64 + 1.0);
            for net in [&mut self.encoder, &mut self.decoder] {
                visit_bn(net, &mut |bn| bn.momentum = momentum);
            }
            let x = stack(data, idx)?;
            let z = self.encoder.forward(&x, true)?;
            self.decoder.forward(&z, true)?;
        }
        for net in [&mut self.encoder, &mut self.decoder] {
            visit_bn(net, &mut |bn| bn.momentum = 0.1);
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<Tensor<T>> {
        self.encoder.state().into_iter().chain(self.decoder.state()).map(|(_, t)| t.clone()).collect()
    }

    fn restore(&mut self, snap: Vec<Tensor<T>>) {
        let dst = self.encoder.state_mut().into_iter().chain(self.decoder.state_mut());
        for ((_, d), s) in dst.zip(snap) {
            *d = s;
        }
    }
}

fn as_batch<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    match v.shape() {
        [1, d, h, w] => Ok(v.clone().reshape(&[1, 1, *d, *h, *w])?),
        s => Err(VolumeNetError::WrongResolution { expected: 0, got: [s.len(), 0, 0] }),
    }
}

fn visit_bn<T: Real>(net: &mut Sequential<T>, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
    for l in net.layers.iter_mut() {
        l.visit_batch_norm(f);
    }
}

/// Index batches; a trailing singleton batch is merged into its neighbour
/// because batch norm needs at least two samples.
fn make_batches(n: usize, batch: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..n).collect();
    batches_of(&idx, batch)
}

fn batches_of(idx: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let batch = batch.max(2);
    if idx.len() == 1 {
        return vec![vec![idx[0], idx[0]]];
    }
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn stack<T: Real>(data: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i]).collect();
    Ok(Tensor::stack(&items)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeNetReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    /// Eval-mode reconstruction PSNR per training volume.
    pub train_psnr: Vec<f64>,
    pub mean_train_psnr: f64,
}

/// Mean over volumes of the per-volume voxel MSE, in eval mode.
pub fn reconstruction_loss<T: Real>(net: &VolumeNet<T>, data: &[Tensor<T>]) -> Result<f64> {
    let mut acc = 0.0;
    for v in data {
        acc += mse(&net.reconstruct(v)?, v)?.to_f64().unwrap_or(f64::NAN);
    }
    Ok(acc / data.len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Trains on prepared `[1, r, r, r]` tensors. Early stopping watches the
/// validation loss when a validation set is given, else the training loss;
/// the best weights are restored at the end.
pub fn train_volumenet(
    train: &[Tensor<f32>],
    val: &[Tensor<f32>],
    arch: VolumeNetArch,
    cfg: &OptimConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainLogRow),
) -> Result<(VolumeNet<f32>, VolumeNetReport)> {
    if train.is_empty() {
        return Err(VolumeNetError::EmptyDataset);
    }
    let mut net = VolumeNet::<f32>::new(arch, seed);
    for v in train.iter().chain(val) {
        net.check_input(&as_batch(v)?)?;
    }
    let mut adam = Adam::new(cfg);
    let mut rng = rng_for(seed, 0x7368);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    let mut last_train = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in batches_of(&order, cfg.batch_size) {
            let x = stack(train, &idx)?;
            total += net.step(&x, &mut adam, lr, cfg.clip_norm)? * idx.len() as f64;
            count += idx.len();
        }
        last_train = total / count as f64;
        epochs_run = epoch + 1;
        let val_loss = if val.is_empty() { None } else { Some(reconstruction_loss(&net, val)?) };
        log(&TrainLogRow { epoch, train_loss: last_train, val_loss, lr });
        let (improved, stop) = stopper.update(val_loss.unwrap_or(last_train));
        if improved {
            best = Some(net.snapshot());
        }
        if stop {
            break;
        }
    }
    if let Some(snap) = best {
        net.restore(snap);
    }
    net.recalibrate_bn(train, cfg.batch_size)?;
    let train_psnr = train
        .iter()
        .map(|v| Ok(psnr_from_mse(mse(&net.reconstruct(v)?, v)? as f64, 2.0)))
        .collect::<Result<Vec<f64>>>()?;
    let mean_train_psnr = train_psnr.iter().sum::<f64>() / train_psnr.len() as f64;
    let report = VolumeNetReport {
        epochs_run,
        best_epoch: stopper.best_epoch,
        final_train_loss: last_train,
        best_val_loss: (!val.is_empty()).then_some(stopper.best),
        train_psnr,
        mean_train_psnr,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        let a: VolumeNetArch = "32^3F4".parse().unwrap();
        assert_eq!(a, VolumeNetArch { input_res: 32, feature_dim: 4 });
        assert_eq!(a.to_string(), "32^3F4");
        assert_eq!("128³F2".parse::<VolumeNetArch>().unwrap().to_string(), "128^3F2");
        assert!("48^3F4".parse::<VolumeNetArch>().is_err());
        assert!("32^3F".parse::<VolumeNetArch>().is_err());
    }

    #[test]
    fn channel_ramp() {
        assert_eq!(VolumeNetArch::new(32, 4).unwrap().channels(), [16, 32, 64, 128]);
        assert_eq!(VolumeNetArch::new(128, 2).unwrap().channels(), [16, 32, 64, 128, 256, 256]);
    }

    #[test]
    fn shapes_and_bounds() {
        let net = VolumeNet::<f32>::new(VolumeNetArch::default(), 3);
        let v = Tensor::from_fn(&[1, 32, 32, 32], |i| ((i % 97) as f32 / 48.0) - 1.0);
        let z = net.encode(&v).unwrap();
        assert_eq!(z.len(), 4);
        let y = net.decode(&z).unwrap();
        assert_eq!(y.shape(), v.shape());
        assert!(y.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(net.encode(&Tensor::zeros(&[1, 32, 32, 32])).unwrap().iter().all(|x| x.is_finite()));
        assert!(matches!(
            net.encode(&Tensor::zeros(&[1, 16, 16, 16])),
            Err(VolumeNetError::WrongResolution { expected: 32, .. })
        ));
        assert!(matches!(net.decode(&[0.0; 3]), Err(VolumeNetError::WrongDim { expected: 4, got: 3 })));
    }

    #[test]
    fn batches_never_hold_one_sample() {
        assert_eq!(batches_of(&[0, 1, 2, 3, 4], 2), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(batches_of(&[7], 16), vec![vec![7, 7]]);
        assert_eq!(batches_of(&[0, 1, 2], 16), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn psnr_formula() {
        assert_eq!(psnr_from_mse(4.0, 2.0), 0.0);
        assert!((psnr_from_mse(0.0004, 2.0) - 40.0).abs() < 1e-9);
        assert!(psnr_from_mse(0.0, 2.0).is_infinite());
    }
}
