//! Central finite-difference oracle for nnkit layers in f64.
//!
//! The scalar probed is `L = sum(y * r)` for a fixed random `r`, so the
//! upstream gradient fed to `backward` is `r` itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rendertime_core::nn::{conv_out, tconv_out, BatchNorm, Conv3d, ConvTranspose3d, Layer, Linear, Selu, Tanh, Tensor};
use rendertime_core::nn::{mse, mse_grad};

pub const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let y = layer.forward(x, true).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares analytic input and parameter gradients of `layer` at `x`
/// against central differences.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Report {
    let y = layer.forward(x, true).unwrap();
    let r = random_tensor(y.shape(), rng);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r).unwrap();
    assert_eq!(dx.shape(), x.shape());
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let x0 = xp.data()[i];
        xp.data_mut()[i] = x0 + H;
        let lp = probe(layer, &xp, &r);
        xp.data_mut()[i] = x0 - H;
        let lm = probe(layer, &xp, &r);
        xp.data_mut()[i] = x0;
        max_rel = max_rel.max(rel_err(dx.data()[i], (lp - lm) / (2.0 * H)));
        checked += 1;
    }
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let v0 = layer.params_mut()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = v0 + H;
            let lp = probe(layer, x, &r);
            layer.params_mut()[pi].value.data_mut()[j] = v0 - H;
            let lm = probe(layer, x, &r);
            layer.params_mut()[pi].value.data_mut()[j] = v0;
            max_rel = max_rel.max(rel_err(g[j], (lp - lm) / (2.0 * H)));
            checked += 1;
        }
    }
    Report { max_rel, checked }
}

pub fn check_mse(shape: &[usize], rng: &mut ChaCha8Rng) -> Report {
    let p = random_tensor(shape, rng);
    let t = random_tensor(shape, rng);
    let g = mse_grad(&p, &t).unwrap();
    let mut pp = p.clone();
    let mut max_rel = 0.0f64;
    for i in 0..p.len() {
        let v0 = pp.data()[i];
        pp.data_mut()[i] = v0 + H;
        let lp = mse(&pp, &t).unwrap();
        pp.data_mut()[i] = v0 - H;
        let lm = mse(&pp, &t).unwrap();
        pp.data_mut()[i] = v0;
        max_rel = max_rel.max(rel_err(g.data()[i], (lp - lm) / (2.0 * H)));
    }
    Report { max_rel, checked: p.len() }
}

/// Random conv geometry with a valid, non-empty output.
pub fn conv_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, [usize; 5]) {
    loop {
        let k = rng.random_range(1..=4);
        let s = rng.random_range(1..=2);
        let p = rng.random_range(0..=1);
        let d = rng.random_range(2..=6);
        if conv_out(d, k, s, p).is_some_and(|o| o >= 1) {
            let n = rng.random_range(1..=2);
            let ic = rng.random_range(1..=3);
            let oc = rng.random_range(1..=3);
            return (ic, oc, k, s, p, [n, ic, d, d, d]);
        }
    }
}

pub fn tconv_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, [usize; 5]) {
    loop {
        let k = rng.random_range(1..=4);
        let s = rng.random_range(1..=2);
        let p = rng.random_range(0..=1);
        let op = rng.random_range(0..s);
        let d = rng.random_range(1..=4);
        if tconv_out(d, k, s, p, op).is_some_and(|o| o >= 1) {
            let n = rng.random_range(1..=2);
            let ic = rng.random_range(1..=3);
            let oc = rng.random_range(1..=3);
            return (ic, oc, k, s, p, op, [n, ic, d, d, d]);
        }
    }
}

/// All layer checks for one randomized case; returns (name, report) pairs.
pub fn check_case(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Report)> {
    let mut out = Vec::new();

    let (ic, oc, k, s, p, shape) = conv_case(rng);
    let mut conv = Conv3d::<f64>::new(ic, oc, k, s, p, rng);
    randomize_bias(&mut conv, rng);
    let x = random_tensor(&shape, rng);
    out.push(("conv3d", check_layer(&mut conv, &x, rng)));

    let (ic, oc, k, s, p, op, shape) = tconv_case(rng);
    let mut tconv = ConvTranspose3d::<f64>::new(ic, oc, k, s, p, op, rng);
    randomize_bias(&mut tconv, rng);
    let x = random_tensor(&shape, rng);
    out.push(("tconv3d", check_layer(&mut tconv, &x, rng)));

    let c = rng.random_range(1..=3);
    let n = rng.random_range(2..=4);
    let d = rng.random_range(1..=3);
    let mut bn = BatchNorm::<f64>::new(c);
    bn.gamma.value = random_tensor(&[c], rng);
    bn.beta.value = random_tensor(&[c], rng);
    let x = random_tensor(&[n, c, d, d, d], rng);
    out.push(("batchnorm", check_layer(&mut bn, &x, rng)));
    let x = random_tensor(&[n + 2, c], rng);
    out.push(("batchnorm_fc", check_layer(&mut bn, &x, rng)));

    let shape = [rng.random_range(1..=4), rng.random_range(1..=8)];
    let x = random_tensor(&shape, rng).map(|v| 2.0 * v);
    out.push(("selu", check_layer(&mut Selu::new(), &x, rng)));
    out.push(("tanh", check_layer(&mut Tanh::new(), &x, rng)));

    let (i, o) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let mut fc = Linear::<f64>::new(i, o, rng);
    randomize_bias(&mut fc, rng);
    let x = random_tensor(&[rng.random_range(1..=4), i], rng);
    out.push(("fc", check_layer(&mut fc, &x, rng)));

    out.push(("mse", check_mse(&[rng.random_range(1..=4), rng.random_range(1..=6)], rng)));
    out
}

fn randomize_bias(layer: &mut dyn Layer<f64>, rng: &mut ChaCha8Rng) {
    if let Some(b) = layer.params_mut().into_iter().nth(1) {
        b.value = random_tensor(b.value.shape(), rng).map(|v| 0.5 * v);
    }
}
