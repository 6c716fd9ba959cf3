//! Pointwise and normalization layers, global average pooling and the
//! softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Axis, Dims, Reduction, Tensor4};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward(x: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grad.mul(&mask)
}

/// Cached values of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
    /// Batch mean and (biased) variance; `None` when running statistics
    /// were used.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn channel_stats(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let count = (d.n() * d.plane()) as f64;
    let mean = x.reduce(Reduction::Mean, &[Axis::N, Axis::H, Axis::W]).expect("axes given").into_vec();
    let mut var = vec![0.0; d.c()];
    for n in 0..d.n() {
        for (c, v) in var.iter_mut().enumerate() {
            *v += x.plane(n, c).iter().map(|&a| (a - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn per_channel(x: &Tensor4, f: impl Fn(usize, f64) -> f64) -> Tensor4 {
    let d = x.dims();
    let mut out = x.clone();
    let p = d.plane();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f((i / p) % d.c(), *v);
    }
    out
}

/// Normalizes each channel with batch statistics (`running = None`) or with
/// the supplied running mean and variance, then applies scale and shift.
pub fn batchnorm_forward(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Tensor4, BatchNormCache)> {
    let c = x.dims().c();
    for p in [gamma, beta] {
        if p.dims().as_array() != [1, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                expected: Dims::derived(1, c, 1, 1),
                found: p.dims(),
            });
        }
    }
    let (mean, var, batch_stats) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let (m, v) = channel_stats(x);
            (m.clone(), v.clone(), Some((m, v)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    let xhat = per_channel(x, |ch, v| (v - mean[ch]) * inv_std[ch]);
    let (g, b) = (gamma.data(), beta.data());
    let y = per_channel(&xhat, |ch, v| g[ch] * v + b[ch]);
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats,
        },
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor4,
    pub gamma: Tensor4,
    pub beta: Tensor4,
}

pub fn batchnorm_backward(grad: &Tensor4, gamma: &Tensor4, cache: &BatchNormCache) -> Result<BatchNormGrads> {
    let d = grad.dims();
    if d != cache.xhat.dims() {
        return Err(Error::ShapeMismatch {
            expected: cache.xhat.dims(),
            found: d,
        });
    }
    let axes = [Axis::N, Axis::H, Axis::W];
    let dbeta = grad.reduce(Reduction::Sum, &axes)?;
    let dgamma = grad.mul(&cache.xhat)?.reduce(Reduction::Sum, &axes)?;
    let g = gamma.data();
    let input = if cache.batch_stats.is_some() {
        // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
        let count = (d.n() * d.plane()) as f64;
        let (sb, sg) = (dbeta.data(), dgamma.data());
        let mut out = grad.clone();
        let p = d.plane();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / p) % d.c();
            let xh = cache.xhat.data()[i];
            *v = g[ch] * cache.inv_std[ch] / count * (count * *v - sb[ch] - xh * sg[ch]);
        }
        out
    } else {
        per_channel(grad, |ch, v| v * g[ch] * cache.inv_std[ch])
    };
    Ok(BatchNormGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn global_avg_pool_forward(x: &Tensor4) -> Tensor4 {
    x.reduce(Reduction::Mean, &[Axis::H, Axis::W]).expect("axes given")
}

pub fn global_avg_pool_backward(grad: &Tensor4, input: Dims) -> Result<Tensor4> {
    let expected = Dims::derived(input.n(), input.c(), 1, 1);
    if grad.dims() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            found: grad.dims(),
        });
    }
    let p = input.plane();
    let scale = 1.0 / p as f64;
    let data = (0..input.len()).map(|i| grad.data()[i / p] * scale).collect();
    Tensor4::from_vec(input, data)
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient with respect to the logits. `logits` has dims `(n, K, 1, 1)`.
pub fn softmax_ce(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let d = logits.dims();
    let (n, classes) = (d.n(), d.c());
    if d.plane() != 1 {
        return Err(Error::Architecture(format!("logits must be (n, K, 1, 1), got {d}")));
    }
    if labels.len() != n {
        return Err(Error::Architecture(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grad = Vec::with_capacity(d.len());
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss += z.ln() + max - row[label];
        grad.extend(exp.iter().enumerate().map(|(k, e)| {
            let p = e / z;
            (if k == label { p - 1.0 } else { p }) / n as f64
        }));
    }
    Ok((loss / n as f64, Tensor4::from_vec(d, grad)?))
}

/// Top-1 predictions from `(n, K, 1, 1)` logits; ties go to the lowest class.
pub fn argmax_classes(logits: &Tensor4) -> Vec<usize> {
    let k = logits.dims().c();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
