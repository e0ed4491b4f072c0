use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tensor::{dot, matmul, Real, Tensor};
use super::{shape_err, NnError, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// LeCun-normal initialization (std = 1/sqrt(fan_in)), suited to SELU.
fn lecun<T: Real>(shape: &[usize], fan_in: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0 / fan_in.max(1.0).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

pub trait Layer<T: Real>: Send + Sync {
    /// Forward pass that caches whatever `backward` needs.
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>>;
    /// Eval-mode forward without caching.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Inference on one `[1, ..]` row; Linear layers skip the GEMM packing.
    fn infer_row(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x)
    }
    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Persistent tensors (parameters, then buffers) by local name.
    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }

    /// Calls `f` on every batch-norm layer reachable from this one.
    fn visit_batch_norm(&mut self, _f: &mut dyn FnMut(&mut BatchNorm<T>)) {}
}

pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad >= k && stride > 0).then(|| (input + 2 * pad - k) / stride + 1)
}

pub fn tconv_out(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let full = (input.checked_sub(1)? * stride + k + out_pad).checked_sub(2 * pad)?;
    (full >= 1 && input >= 1).then_some(full)
}

/// Convolution geometry from an `in_sp` grid onto an `out_sp` grid
/// (spatial order D, H, W).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.in_sp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Calls `f(row, col, input_index)` for every valid tap of channel 0.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [di, hi, wi] = self.in_sp;
        let [do_, ho, wo] = self.out_sp;
        let (k, s, p) = (self.k, self.s as isize, self.p as isize);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (kz * k + ky) * k + kx;
                    for oz in 0..do_ {
                        let iz = oz as isize * s - p + kz as isize;
                        if iz < 0 || iz >= di as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy as isize * s - p + ky as isize;
                            if iy < 0 || iy >= hi as isize {
                                continue;
                            }
                            let base_in = (iz as usize * hi + iy as usize) * wi;
                            let base_out = (oz * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = ox as isize * s - p + kx as isize;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                f(row, base_out + ox, base_in + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `x` is `[c, in]`; `cols` becomes `[c*k³, out]`.
    fn im2col<T: Real>(&self, x: &[T], c: usize) -> Vec<T> {
        let (pin, pout, k3) = (self.in_len(), self.out_len(), self.k3());
        let mut cols = vec![T::zero(); c * k3 * pout];
        for ci in 0..c {
            let xs = &x[ci * pin..(ci + 1) * pin];
            let cs = &mut cols[ci * k3 * pout..(ci + 1) * k3 * pout];
            self.for_each_tap(|row, col, idx| cs[row * pout + col] = xs[idx]);
        }
        cols
    }

    /// Adjoint of `im2col`: scatters `[c*k³, out]` back onto `[c, in]`.
    fn col2im<T: Real>(&self, cols: &[T], c: usize, x: &mut [T]) {
        let (pin, pout, k3) = (self.in_len(), self.out_len(), self.k3());
        for ci in 0..c {
            let xs = &mut x[ci * pin..(ci + 1) * pin];
            let cs = &cols[ci * k3 * pout..(ci + 1) * k3 * pout];
            self.for_each_tap(|row, col, idx| xs[idx] = xs[idx] + cs[row * pout + col]);
        }
    }
}

fn spatial(shape: &[usize], channels: usize, what: &str) -> Result<(usize, [usize; 3])> {
    if shape.len() != 5 || shape[1] != channels {
        return shape_err(format!("{what} expects [N, {channels}, D, H, W], got {shape:?}"));
    }
    Ok((shape[0], [shape[2], shape[3], shape[4]]))
}

/// Sums per-sample parameter gradients in sample order so the result does
/// not depend on how samples were scheduled across threads.
fn reduce_into<T: Real>(acc: &mut [T], parts: impl Iterator<Item = Vec<T>>) {
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
}

/// 3D cross-correlation; weight `[out_c, in_c, k, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Tensor<T>, Geometry)>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k * k) as f64;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::new(lecun(&[out_c, in_c, k, k, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            cache: None,
        }
    }

    fn geometry(&self, in_sp: [usize; 3]) -> Result<Geometry> {
        let mut out_sp = [0; 3];
        for i in 0..3 {
            out_sp[i] = conv_out(in_sp[i], self.k, self.stride, self.pad)
                .ok_or_else(|| NnError::ShapeMismatch(format!("conv input {in_sp:?} smaller than kernel")))?;
        }
        Ok(Geometry { in_sp, out_sp, k: self.k, s: self.stride, p: self.pad })
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Geometry)> {
        let (n, in_sp) = spatial(x.shape(), self.in_c, "conv3d")?;
        let g = self.geometry(in_sp)?;
        let (pin, pout, kc) = (g.in_len(), g.out_len(), self.in_c * g.k3());
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let outs: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = g.im2col(&x.data()[i * self.in_c * pin..(i + 1) * self.in_c * pin], self.in_c);
                let mut y = vec![T::zero(); self.out_c * pout];
                for (oc, chunk) in y.chunks_mut(pout).enumerate() {
                    chunk.fill(b[oc]);
                }
                matmul(self.out_c, kc, pout, w, false, &cols, false, &mut y, T::one());
                y
            })
            .collect();
        let shape = vec![n, self.out_c, g.out_sp[0], g.out_sp[1], g.out_sp[2]];
        Ok((Tensor::new(shape, outs.concat())?, g))
    }
}

impl<T: Real> Layer<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let (y, g) = self.run(x)?;
        self.cache = Some((x.clone(), g));
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, g) = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let n = x.shape()[0];
        if dy.shape() != [n, self.out_c, g.out_sp[0], g.out_sp[1], g.out_sp[2]] {
            return shape_err(format!("conv3d grad shape {:?}", dy.shape()));
        }
        let (pin, pout, kc) = (g.in_len(), g.out_len(), self.in_c * g.k3());
        let w = self.weight.value.data();
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &x.data()[i * self.in_c * pin..(i + 1) * self.in_c * pin];
                let dyi = &dy.data()[i * self.out_c * pout..(i + 1) * self.out_c * pout];
                let cols = g.im2col(xi, self.in_c);
                let mut dw = vec![T::zero(); self.out_c * kc];
                matmul(self.out_c, pout, kc, dyi, false, &cols, true, &mut dw, T::zero());
                let db = dyi.chunks(pout).map(|c| c.iter().copied().sum()).collect();
                let mut dcols = vec![T::zero(); kc * pout];
                matmul(kc, self.out_c, pout, w, true, dyi, false, &mut dcols, T::zero());
                let mut dx = vec![T::zero(); self.in_c * pin];
                g.col2im(&dcols, self.in_c, &mut dx);
                (dw, db, dx)
            })
            .collect();
        let mut dx_all = Vec::with_capacity(x.len());
        let mut dws = Vec::with_capacity(n);
        let mut dbs = Vec::with_capacity(n);
        for (dw, db, dx) in parts {
            dws.push(dw);
            dbs.push(db);
            dx_all.extend(dx);
        }
        reduce_into(self.weight.grad.data_mut(), dws.into_iter());
        reduce_into(self.bias.grad.data_mut(), dbs.into_iter());
        Tensor::new(x.shape().to_vec(), dx_all)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight.value), ("bias".into(), &self.bias.value)]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight.value), ("bias".into(), &mut self.bias.value)]
    }
}

/// Transposed 3D convolution (adjoint of [`Conv3d`] plus bias); weight
/// `[in_c, out_c, k, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Tensor<T>, Geometry)>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output sees roughly in_c * (k/stride)^3 inputs.
        let fan_in = (in_c * k * k * k) as f64 / (stride * stride * stride) as f64;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            out_pad,
            weight: Param::new(lecun(&[in_c, out_c, k, k, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            cache: None,
        }
    }

    /// Geometry of the equivalent forward convolution (output grid → input grid).
    fn geometry(&self, in_sp: [usize; 3]) -> Result<Geometry> {
        if self.out_pad >= self.stride.max(1) && self.out_pad > 0 {
            return shape_err("output padding must be smaller than stride");
        }
        let mut out_sp = [0; 3];
        for i in 0..3 {
            out_sp[i] = tconv_out(in_sp[i], self.k, self.stride, self.pad, self.out_pad)
                .ok_or_else(|| NnError::ShapeMismatch(format!("tconv input {in_sp:?} too small")))?;
        }
        Ok(Geometry { in_sp: out_sp, out_sp: in_sp, k: self.k, s: self.stride, p: self.pad })
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Geometry)> {
        let (n, in_sp) = spatial(x.shape(), self.in_c, "conv_transpose3d")?;
        let g = self.geometry(in_sp)?;
        // In conv terms: the tconv input lives on g.out_sp, its output on g.in_sp.
        let (p_small, p_big, kc) = (g.out_len(), g.in_len(), self.out_c * g.k3());
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let outs: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &x.data()[i * self.in_c * p_small..(i + 1) * self.in_c * p_small];
                let mut cols = vec![T::zero(); kc * p_small];
                matmul(kc, self.in_c, p_small, w, true, xi, false, &mut cols, T::zero());
                let mut y = vec![T::zero(); self.out_c * p_big];
                g.col2im(&cols, self.out_c, &mut y);
                for (oc, chunk) in y.chunks_mut(p_big).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + b[oc]);
                }
                y
            })
            .collect();
        let shape = vec![n, self.out_c, g.in_sp[0], g.in_sp[1], g.in_sp[2]];
        Ok((Tensor::new(shape, outs.concat())?, g))
    }
}

impl<T: Real> Layer<T> for ConvTranspose3d<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let (y, g) = self.run(x)?;
        self.cache = Some((x.clone(), g));
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, g) = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let n = x.shape()[0];
        if dy.shape() != [n, self.out_c, g.in_sp[0], g.in_sp[1], g.in_sp[2]] {
            return shape_err(format!("conv_transpose3d grad shape {:?}", dy.shape()));
        }
        let (p_small, p_big, kc) = (g.out_len(), g.in_len(), self.out_c * g.k3());
        let w = self.weight.value.data();
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &x.data()[i * self.in_c * p_small..(i + 1) * self.in_c * p_small];
                let dyi = &dy.data()[i * self.out_c * p_big..(i + 1) * self.out_c * p_big];
                let dcols = g.im2col(dyi, self.out_c);
                let mut dx = vec![T::zero(); self.in_c * p_small];
                matmul(self.in_c, kc, p_small, w, false, &dcols, false, &mut dx, T::zero());
                let mut dw = vec![T::zero(); self.in_c * kc];
                matmul(self.in_c, p_small, kc, xi, false, &dcols, true, &mut dw, T::zero());
                let db = dyi.chunks(p_big).map(|c| c.iter().copied().sum()).collect();
                (dw, db, dx)
            })
            .collect();
        let mut dx_all = Vec::with_capacity(x.len());
        let mut dws = Vec::with_capacity(n);
        let mut dbs = Vec::with_capacity(n);
        for (dw, db, dx) in parts {
            dws.push(dw);
            dbs.push(db);
            dx_all.extend(dx);
        }
        reduce_into(self.weight.grad.data_mut(), dws.into_iter());
        reduce_into(self.bias.grad.data_mut(), dbs.into_iter());
        Tensor::new(x.shape().to_vec(), dx_all)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight.value), ("bias".into(), &self.bias.value)]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight.value), ("bias".into(), &mut self.bias.value)]
    }
}

/// Per-channel batch normalization over `[N, C, ...]`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return shape_err(format!("batch norm over {} channels got {s:?}", self.channels));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    fn apply(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let (n, s) = (x.shape()[0], x.len() / (x.shape()[0] * self.channels));
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * s;
                for j in off..off + s {
                    let h = (x.data()[j] - mean[c]) * inv_std[c];
                    xhat.data_mut()[j] = h;
                    y.data_mut()[j] = g[c] * h + b[c];
                }
            }
        }
        (y, xhat)
    }

    fn eval_stats(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::lit(self.eps);
        let inv = self.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (self.running_mean.data().to_vec(), inv)
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let (n, s) = self.dims(x)?;
        let (mean, inv_std) = if train {
            if n < 2 {
                return Err(NnError::BatchTooSmall(n));
            }
            let m = (n * s) as f64;
            let mut mean = vec![T::zero(); self.channels];
            let mut var = vec![T::zero(); self.channels];
            for c in 0..self.channels {
                let mut acc = 0.0f64;
                for i in 0..n {
                    let off = (i * self.channels + c) * s;
                    acc += x.data()[off..off + s].iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>();
                }
                let mu = acc / m;
                let mut sq = 0.0f64;
                for i in 0..n {
                    let off = (i * self.channels + c) * s;
                    sq += x.data()[off..off + s]
                        .iter()
                        .map(|v| (v.to_f64().unwrap_or(0.0) - mu).powi(2))
                        .sum::<f64>();
                }
                mean[c] = T::lit(mu);
                var[c] = T::lit(sq / m);
                let mom = self.momentum;
                let rm = &mut self.running_mean.data_mut()[c];
                *rm = T::lit((1.0 - mom) * rm.to_f64().unwrap_or(0.0) + mom * mu);
                let rv = &mut self.running_var.data_mut()[c];
                *rv = T::lit((1.0 - mom) * rv.to_f64().unwrap_or(1.0) + mom * sq / (m - 1.0));
            }
            let eps = T::lit(self.eps);
            (mean, var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
        } else {
            self.eval_stats()
        };
        let (y, xhat) = self.apply(x, &mean, &inv_std);
        self.cache = Some(BnCache { xhat, inv_std, train });
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.dims(x)?;
        let (mean, inv_std) = self.eval_stats();
        Ok(self.apply(x, &mean, &inv_std).0)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCache)?;
        if dy.shape() != cache.xhat.shape() {
            return shape_err(format!("batch norm grad shape {:?}", dy.shape()));
        }
        let (n, s) = (dy.shape()[0], dy.len() / (dy.shape()[0] * self.channels));
        let m = T::lit((n * s) as f64);
        let g = self.gamma.value.data().to_vec();
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * self.channels + c) * s;
                for j in off..off + s {
                    sum_dy = sum_dy + dy.data()[j];
                    sum_dy_xhat = sum_dy_xhat + dy.data()[j] * cache.xhat.data()[j];
                }
            }
            self.gamma.grad.data_mut()[c] = self.gamma.grad.data()[c] + sum_dy_xhat;
            self.beta.grad.data_mut()[c] = self.beta.grad.data()[c] + sum_dy;
            let k = g[c] * cache.inv_std[c];
            for i in 0..n {
                let off = (i * self.channels + c) * s;
                for j in off..off + s {
                    dx.data_mut()[j] = if cache.train {
                        k * (dy.data()[j] - sum_dy / m - cache.xhat.data()[j] * sum_dy_xhat / m)
                    } else {
                        k * dy.data()[j]
                    };
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("weight".into(), &self.gamma.value),
            ("bias".into(), &self.beta.value),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("weight".into(), &mut self.gamma.value),
            ("bias".into(), &mut self.beta.value),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }

    fn visit_batch_norm(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(self);
    }
}

/// Fully connected layer; weight `[out, in]`, input `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_f,
            out_f,
            weight: Param::new(lecun(&[out_f, in_f], in_f as f64, rng)),
            bias: Param::new(Tensor::zeros(&[out_f])),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            [n, f] if *f == self.in_f => Ok(*n),
            s => shape_err(format!("linear expects [N, {}], got {s:?}", self.in_f)),
        }
    }
}

impl<T: Real> Linear<T> {
    fn affine(&self, x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        let mut y = Vec::with_capacity(n * self.out_f);
        for _ in 0..n {
            y.extend_from_slice(self.bias.value.data());
        }
        matmul(n, self.in_f, self.out_f, x.data(), false, self.weight.value.data(), true, &mut y, T::one());
        Tensor::new(vec![n, self.out_f], y)
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let n = self.check(x)?;
        let y = self.affine(x, n)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(x)?;
        self.affine(x, n)
    }

    fn infer_row(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.check(x)? != 1 {
            return shape_err(format!("infer_row expects one row, got {:?}", x.shape()));
        }
        let y = self
            .weight
            .value
            .data()
            .chunks_exact(self.in_f)
            .zip(self.bias.value.data())
            .map(|(w, &b)| b + dot(w, x.data()))
            .collect();
        Tensor::new(vec![1, self.out_f], y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let n = x.shape()[0];
        if dy.shape() != [n, self.out_f] {
            return shape_err(format!("linear grad shape {:?}", dy.shape()));
        }
        matmul(self.out_f, n, self.in_f, dy.data(), true, x.data(), false, self.weight.grad.data_mut(), T::one());
        for row in dy.data().chunks(self.out_f) {
            for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        let mut dx = vec![T::zero(); n * self.in_f];
        matmul(n, self.out_f, self.in_f, dy.data(), false, self.weight.value.data(), false, &mut dx, T::zero());
        Tensor::new(vec![n, self.in_f], dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight.value), ("bias".into(), &self.bias.value)]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight.value), ("bias".into(), &mut self.bias.value)]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Selu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Real> Selu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    #[inline]
    pub fn f(x: T) -> T {
        let (l, a) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
        if x > T::zero() { l * x } else { l * a * (x.exp() - T::one()) }
    }

    #[inline]
    pub fn df(x: T) -> T {
        let (l, a) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
        if x > T::zero() { l } else { l * a * x.exp() }
    }
}

impl<T: Real> Layer<T> for Selu<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(Self::f))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or(NnError::NoCache)?;
        if dy.shape() != x.shape() {
            return shape_err("selu grad shape");
        }
        let data = x.data().iter().zip(dy.data()).map(|(&x, &d)| d * Self::df(x)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Real> Tanh<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Real> Layer<T> for Tanh<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| v.tanh()))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.cache.as_ref().ok_or(NnError::NoCache)?;
        if dy.shape() != y.shape() {
            return shape_err("tanh grad shape");
        }
        let data = y.data().iter().zip(dy.data()).map(|(&y, &d)| d * (T::one() - y * y)).collect();
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// Reshapes everything after the batch axis.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub tail: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(tail: &[usize]) -> Self {
        Self { tail: tail.to_vec(), input_shape: None }
    }
}

impl<T: Real> Layer<T> for Reshape {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        Layer::<T>::infer(self, x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![x.shape()[0]];
        shape.extend_from_slice(&self.tail);
        x.clone().reshape(&shape)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or(NnError::NoCache)?;
        dy.clone().reshape(shape)
    }
}

/// Ordered stack of layers; state names are prefixed with the layer index.
#[derive(Default)]
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in self.layers.iter_mut() {
            h = l.forward(&h, train)?;
        }
        Ok(h)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    fn infer_row(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer_row(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn state(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.state_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    fn visit_batch_norm(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        for l in self.layers.iter_mut() {
            l.visit_batch_norm(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn output_shape_formulas() {
        assert_eq!(conv_out(128, 4, 2, 1), Some(64));
        assert_eq!(conv_out(2, 4, 2, 0), None);
        assert_eq!(tconv_out(2, 4, 2, 1, 0), Some(4));
        assert_eq!(tconv_out(64, 4, 2, 1, 0), Some(128));
        assert_eq!(tconv_out(3, 3, 2, 1, 1), Some(6));
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut rng = rng_for(0, 0);
        let mut conv = Conv3d::<f64>::new(1, 1, 1, 1, 0, &mut rng);
        conv.weight.value.data_mut()[0] = 1.0;
        let x = Tensor::from_fn(&[2, 1, 3, 4, 5], |i| i as f64 * 0.1 - 1.0);
        assert_eq!(conv.infer(&x).unwrap(), x);
    }

    #[test]
    fn conv_shape_mismatch_is_reported() {
        let mut rng = rng_for(0, 0);
        let conv = Conv3d::<f32>::new(2, 4, 4, 2, 1, &mut rng);
        let x = Tensor::zeros(&[1, 3, 8, 8, 8]);
        assert!(matches!(conv.infer(&x), Err(NnError::ShapeMismatch(_))));
        let y = conv.infer(&Tensor::zeros(&[1, 2, 128, 2, 2])).unwrap();
        assert_eq!(y.shape(), &[1, 4, 64, 1, 1]);
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        let mut rng = rng_for(1, 0);
        let mut conv = Conv3d::<f64>::new(2, 3, 4, 2, 1, &mut rng);
        let mut tconv = ConvTranspose3d::<f64>::new(3, 2, 4, 2, 1, 0, &mut rng);
        tconv.weight.value = conv.weight.value.clone();
        let x = Tensor::from_fn(&[2, 2, 6, 4, 8], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let y = conv.forward(&x, true).unwrap();
        let dy = Tensor::from_fn(y.shape(), |i| ((i * 104_729) % 97) as f64 / 48.0 - 1.0);
        let dx = conv.backward(&dy).unwrap();
        let t = tconv.infer(&dy).unwrap();
        assert_eq!(t.shape(), dx.shape());
        for (a, b) in t.data().iter().zip(dx.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_statistics_and_affine() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = Tensor::from_fn(&[4, 2, 3], |i| ((i * 31) % 17) as f64 * 0.3 + 2.0);
        let y = bn.forward(&x, true).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..3).map(move |s| (n, s))).map(|(n, s)| y.data()[(n * 2 + c) * 3 + s]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let mut bn2 = BatchNorm::<f64>::new(2);
        bn2.gamma.value.fill(2.0);
        bn2.beta.value.fill(3.0);
        let y2 = bn2.forward(&x, true).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.0 * a + 3.0 - b).abs() < 1e-9);
        }
        assert!(matches!(bn.forward(&Tensor::zeros(&[1, 2, 3]), true), Err(NnError::BatchTooSmall(1))));
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 3]), false).is_ok());
    }

    #[test]
    fn selu_values() {
        assert_eq!(Selu::<f64>::f(0.0), 0.0);
        assert!((Selu::<f64>::f(1.0) - SELU_LAMBDA).abs() < 1e-15);
        assert!((Selu::<f64>::f(-1.0) - SELU_LAMBDA * SELU_ALPHA * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn sequential_state_names() {
        let mut rng = rng_for(0, 0);
        let mut s = Sequential::<f32>::new();
        s.push(Linear::new(3, 4, &mut rng));
        s.push(Selu::new());
        s.push(BatchNorm::new(4));
        let names: Vec<String> = s.state().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "2.weight", "2.bias", "2.running_mean", "2.running_var"]);
        assert_eq!(s.param_count(), 12 + 4 + 8);
    }

    #[test]
    fn linear_row_path_matches_batched() {
        let mut rng = rng_for(2, 0);
        let lin = Linear::<f64>::new(19, 11, &mut rng);
        let x = Tensor::from_fn(&[3, 19], |i| ((i * 37) % 23) as f64 / 11.0 - 1.0);
        let all = lin.infer(&x).unwrap();
        for r in 0..3 {
            let row = Tensor::new(vec![1, 19], x.data()[r * 19..(r + 1) * 19].to_vec()).unwrap();
            let one = lin.infer_row(&row).unwrap();
            for o in 0..11 {
                let naive: f64 = lin.bias.value.data()[o]
                    + (0..19).map(|k| lin.weight.value.data()[o * 19 + k] * row.data()[k]).sum::<f64>();
                assert!((one.data()[o] - naive).abs() < 1e-12);
                assert!((one.data()[o] - all.data()[r * 11 + o]).abs() < 1e-12);
            }
        }
    }
}
