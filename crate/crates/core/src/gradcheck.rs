//! Finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hope::{penalty_gradient, penalty_value, ProjectionWeights};
use crate::layers::{
    dropout, dropout_backward, maxpool_backward, maxpool_forward, relu, relu_backward,
    softmax_cross_entropy, BatchNormLayer, ConvLayer, DenseLayer, Mode,
};
use crate::model::{Network, NetworkConfig};
use crate::tensor::{Matrix, Tensor4};

/// Central differences `(f(x+h·e_k) − f(x−h·e_k)) / 2h` for every coordinate.
/// `x` is restored before returning.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(x: &mut [f64], h: f64, mut f: F) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = f(x);
        x[k] = orig - h;
        let minus = f(x);
        x[k] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Like [`relative_error`] but the denominator never drops below `floor`, so
/// gradients that are zero in exact arithmetic are judged by absolute error.
pub fn floored_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst (floored) relative error over the checked tensor.
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

pub const NET_THRESHOLD: f64 = 1e-4;
pub const LAYER_THRESHOLD: f64 = 1e-6;
pub const PENALTY_THRESHOLD: f64 = 1e-8;

/// Denominator floor: gradients that vanish in exact arithmetic (a conv
/// bias feeding batch norm) are compared by absolute error.
const ERROR_FLOOR: f64 = 1e-6;
const H_LAYER: f64 = 1e-5;
const H_PENALTY: f64 = 1e-6;

/// Knobs for negative controls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SuiteOptions {
    /// Added to every element of the analytic penalty gradient.
    pub penalty_fault: f64,
}

fn result(name: &str, threshold: f64, analytic: &[f64], numeric: &[f64]) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        error: floored_relative_error(analytic, numeric, ERROR_FLOOR),
        threshold,
    }
}

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Tensor4<f64>> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Tie-free input for max pooling: distinct values spaced 0.01 apart.
fn distinct_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Tensor4<f64>> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor4::new(dims, v)
}

/// FD of `x ↦ f(x)` over the tensor's values.
fn fd_tensor(
    x: &Tensor4<f64>,
    mut f: impl FnMut(&Tensor4<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut v = x.data().to_vec();
    let mut err = None;
    let g = central_difference(&mut v, H_LAYER, |vals| {
        let t = Tensor4::new(x.dims(), vals.to_vec()).expect("dims unchanged");
        f(&t).unwrap_or_else(|e| {
            err.get_or_insert(e);
            0.0
        })
    });
    err.map_or(Ok(g), Err)
}

fn fd_slice(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut v = x.to_vec();
    let mut err = None;
    let g = central_difference(&mut v, h, |vals| {
        f(vals).unwrap_or_else(|e| {
            err.get_or_insert(e);
            0.0
        })
    });
    err.map_or(Ok(g), Err)
}

fn conv_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let layer = ConvLayer::new(
        Matrix::new(
            3 * 9,
            4,
            (0..108).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )?,
        (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
        3,
        1,
        1,
    )?;
    let x = random_tensor([2, 3, 5, 5], rng)?;
    let r = random_tensor([2, 4, 5, 5], rng)?;
    let g = layer.backward(&x, &r, true)?;
    let fd = fd_tensor(&x, |t| layer.forward(t)?.dot(&r))?;
    out.push(result(
        "conv/input",
        LAYER_THRESHOLD,
        g.input.as_ref().map_or(&[][..], |t| t.data()),
        &fd,
    ));
    let fd = fd_slice(layer.weights.data(), H_LAYER, |w| {
        let mut l = layer.clone();
        l.weights.data_mut().copy_from_slice(w);
        l.forward(&x)?.dot(&r)
    })?;
    out.push(result(
        "conv/weights",
        LAYER_THRESHOLD,
        g.weights.data(),
        &fd,
    ));
    let fd = fd_slice(&layer.bias, H_LAYER, |b| {
        let mut l = layer.clone();
        l.bias.copy_from_slice(b);
        l.forward(&x)?.dot(&r)
    })?;
    out.push(result("conv/bias", LAYER_THRESHOLD, &g.bias, &fd));
    Ok(())
}

fn projection_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let proj = ProjectionWeights::new(
        Matrix::new(
            5,
            12,
            (0..60).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )?,
        2,
        3,
        2,
        0,
        true,
    )?;
    let x = random_tensor([2, 3, 6, 6], rng)?;
    let r = random_tensor([2, 5, 3, 3], rng)?;
    let (gi, gu) = proj.backward(&x, &r, true)?;
    let fd = fd_tensor(&x, |t| proj.forward(t)?.dot(&r))?;
    out.push(result(
        "projection/input",
        LAYER_THRESHOLD,
        gi.as_ref().map_or(&[][..], |t| t.data()),
        &fd,
    ));
    let fd = fd_slice(proj.u.data(), H_LAYER, |u| {
        let mut p = proj.clone();
        p.u.data_mut().copy_from_slice(u);
        p.forward(&x)?.dot(&r)
    })?;
    out.push(result("projection/u", LAYER_THRESHOLD, gu.data(), &fd));
    Ok(())
}

fn pointwise_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let x = distinct_tensor([2, 3, 6, 6], rng)?;
    let r = random_tensor([2, 3, 3, 3], rng)?;
    let (_, idx) = maxpool_forward(&x, 2, 2)?;
    let g = maxpool_backward(&idx, &r)?;
    let fd = fd_tensor(&x, |t| maxpool_forward(t, 2, 2)?.0.dot(&r))?;
    out.push(result("maxpool/input", LAYER_THRESHOLD, g.data(), &fd));

    // keep |x| >= 0.05 so the FD step never crosses the kink
    let x = Tensor4::from_fn([2, 3, 4, 4], |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })?;
    let r = random_tensor([2, 3, 4, 4], rng)?;
    let g = relu_backward(&x, &r)?;
    let fd = fd_tensor(&x, |t| relu(t).dot(&r))?;
    out.push(result("relu/input", LAYER_THRESHOLD, g.data(), &fd));

    let x = random_tensor([2, 3, 4, 4], rng)?;
    let (_, mask) = dropout(&x, 0.4, Mode::Train, 17)?;
    let g = dropout_backward(mask.as_ref(), &r)?;
    let fd = fd_tensor(&x, |t| dropout(t, 0.4, Mode::Train, 17)?.0.dot(&r))?;
    out.push(result("dropout/input", LAYER_THRESHOLD, g.data(), &fd));
    Ok(())
}

fn batchnorm_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut bn = BatchNormLayer::<f64>::new(3);
    bn.gamma = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.shift = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let x = random_tensor([4, 3, 3, 3], rng)?;
    let r = random_tensor([4, 3, 3, 3], rng)?;
    let (_, cache) = bn.clone().forward(&x, Mode::Train)?;
    let cache = cache.ok_or(Error::MissingCache(0))?;
    let g = bn.backward(&cache, &r)?;
    let loss = |layer: &BatchNormLayer<f64>, t: &Tensor4<f64>| {
        layer.clone().forward(t, Mode::Train)?.0.dot(&r)
    };
    let fd = fd_tensor(&x, |t| loss(&bn, t))?;
    out.push(result(
        "batchnorm/input",
        LAYER_THRESHOLD,
        g.input.data(),
        &fd,
    ));
    let fd = fd_slice(&bn.gamma, H_LAYER, |v| {
        let mut l = bn.clone();
        l.gamma = v.to_vec();
        loss(&l, &x)
    })?;
    out.push(result("batchnorm/gamma", LAYER_THRESHOLD, &g.gamma, &fd));
    let fd = fd_slice(&bn.shift, H_LAYER, |v| {
        let mut l = bn.clone();
        l.shift = v.to_vec();
        loss(&l, &x)
    })?;
    out.push(result("batchnorm/shift", LAYER_THRESHOLD, &g.shift, &fd));
    Ok(())
}

fn dense_and_loss_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let layer = DenseLayer::new(
        Matrix::new(
            12,
            4,
            (0..48).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )?,
        (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )?;
    let x = random_tensor([3, 3, 2, 2], rng)?;
    let r = random_tensor([3, 4, 1, 1], rng)?;
    let g = layer.backward(&x, &r, true)?;
    let fd = fd_tensor(&x, |t| layer.forward(t)?.dot(&r))?;
    out.push(result(
        "dense/input",
        LAYER_THRESHOLD,
        g.input.as_ref().map_or(&[][..], |t| t.data()),
        &fd,
    ));
    let fd = fd_slice(layer.weights.data(), H_LAYER, |w| {
        let mut l = layer.clone();
        l.weights.data_mut().copy_from_slice(w);
        l.forward(&x)?.dot(&r)
    })?;
    out.push(result(
        "dense/weights",
        LAYER_THRESHOLD,
        g.weights.data(),
        &fd,
    ));
    let fd = fd_slice(&layer.bias, H_LAYER, |b| {
        let mut l = layer.clone();
        l.bias.copy_from_slice(b);
        l.forward(&x)?.dot(&r)
    })?;
    out.push(result("dense/bias", LAYER_THRESHOLD, &g.bias, &fd));

    let logits = Matrix::new(4, 5, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let labels = [0, 3, 4, 1];
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    let fd = fd_slice(logits.data(), H_LAYER, |v| {
        Ok(softmax_cross_entropy(&Matrix::new(4, 5, v.to_vec())?, &labels)?.0)
    })?;
    out.push(result("softmax_ce/logits", LAYER_THRESHOLD, g.data(), &fd));
    Ok(())
}

/// Random matrix whose pairwise row dot products all stay at least 0.05
/// from zero, so `h`-sized steps never cross a kink of `|·|`.
pub fn off_kink_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<f64>> {
    loop {
        let u = Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let clear = (0..rows).all(|i| {
            (i + 1..rows).all(|j| {
                u.row(i)
                    .iter()
                    .zip(u.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .abs()
                    > 0.05
            })
        });
        if clear {
            return Ok(u);
        }
    }
}

fn penalty_check(
    rng: &mut ChaCha8Rng,
    options: SuiteOptions,
    out: &mut Vec<CheckResult>,
) -> Result<()> {
    let u = off_kink_matrix(6, 27, rng)?;
    let mut analytic = penalty_gradient(&u)?.into_data();
    analytic
        .iter_mut()
        .for_each(|g| *g += options.penalty_fault);
    let fd = fd_slice(u.data(), H_PENALTY, |v| {
        penalty_value(&Matrix::new(6, 27, v.to_vec())?)
    })?;
    out.push(result("penalty/u", PENALTY_THRESHOLD, &analytic, &fd));
    Ok(())
}

/// conv → projection → maxpool → batchnorm → relu → dense → softmax_ce on
/// 8×8 inputs, batch 4.
pub fn tiny_net_config() -> NetworkConfig {
    NetworkConfig::parse(
        "network name=gradcheck classes=3 input=2x8x8\n\
         conv kernel=3 maps=4 stride=1 pad=1\n\
         hope_projection kernel=2 maps=5 stride=2 pad=0\n\
         maxpool size=2 stride=2\n\
         batchnorm\n\
         relu\n\
         dense units=3\n\
         softmax_ce\n",
    )
    .expect("builtin gradcheck config is valid")
}

/// Whole-network check: one result per parameter tensor.
pub fn network_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::build(&tiny_net_config(), seed)?;
    let x = random_tensor([4, 2, 8, 8], &mut rng)?;
    let labels = [0, 2, 1, 2];
    let pass = net.clone().forward(&x, &labels, Mode::Train, seed)?;
    let grads = net.backward(&pass)?;
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let name = format!("net/{}", net.params()[i].name);
        let fd = fd_slice(net.params()[i].value, H_LAYER, |v| {
            let mut probe = net.clone();
            probe.params_mut()[i].value.copy_from_slice(v);
            Ok(probe.forward(&x, &labels, Mode::Train, seed)?.loss)
        })?;
        out.push(result(&name, NET_THRESHOLD, g.data(), &fd));
    }
    Ok(out)
}

/// Every layer kind, the penalty gradient and the whole tiny network.
pub fn run_suite(options: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C);
    let mut out = Vec::new();
    conv_checks(&mut rng, &mut out)?;
    projection_checks(&mut rng, &mut out)?;
    pointwise_checks(&mut rng, &mut out)?;
    batchnorm_checks(&mut rng, &mut out)?;
    dense_and_loss_checks(&mut rng, &mut out)?;
    penalty_check(&mut rng, options, &mut out)?;
    out.extend(network_checks(7)?);
    Ok(out)
}
