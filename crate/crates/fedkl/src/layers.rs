//! Forward and hand-derived backward passes for every layer the attacks
//! exploit: linear, ReLU, sigmoid, batch normalization, 2-D convolution and
//! the softmax/cross-entropy head. Each backward consumes the cache its
//! forward produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ensure_finite, Tensor};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully-connected layer `u = x · Wᵀ + b` over a batch of row vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    pub(crate) x: Tensor,
}

pub fn linear_forward(layer: &LinearLayer, x: &Tensor) -> Result<(Tensor, LinearCache)> {
    let u = x.matmul(&layer.weight.transpose()?)?;
    let (n, d_o) = (u.shape()[0], u.shape()[1]);
    let mut data = u.data().to_vec();
    for i in 0..n {
        for j in 0..d_o {
            data[i * d_o + j] += layer.bias.get(j);
        }
    }
    ensure_finite("linear_forward", &data)?;
    let u = Tensor::new(vec![n, d_o], data)?;
    Ok((u, LinearCache { x: x.clone() }))
}

/// Gradients of the linear layer: `grad_w = upstreamᵀ·x` (summed over the
/// batch), `grad_b` the column sum of `upstream`, `grad_x = upstream·W`.
pub fn linear_backward(
    layer: &LinearLayer,
    cache: &LinearCache,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = cache.x.shape()[0];
    if upstream.ndim() != 2 || upstream.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            lhs: cache.x.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let grad_w = upstream.transpose()?.matmul(&cache.x)?;
    let grad_b = upstream.reduce(&[0], crate::tensor::Reduction::Sum)?;
    let grad_x = upstream.matmul(&layer.weight)?;
    Ok((grad_w, grad_b, grad_x))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReluCache {
    pub(crate) u: Tensor,
}

pub fn relu_forward(u: &Tensor) -> Result<(Tensor, ReluCache)> {
    let a = u.map("relu_forward", |v| if v > 0.0 { v } else { 0.0 })?;
    Ok((a, ReluCache { u: u.clone() }))
}

/// `grad = upstream ⊙ 1[u > 0]`; the subgradient at exactly 0 is 0.
pub fn relu_backward(cache: &ReluCache, upstream: &Tensor) -> Result<Tensor> {
    if cache.u.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            lhs: cache.u.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let data: Vec<f64> = cache
        .u
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&u, &g)| if u > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(cache.u.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct SigmoidCache {
    pub(crate) sig: Tensor,
}

pub fn sigmoid_forward(u: &Tensor) -> Result<(Tensor, SigmoidCache)> {
    let a = u.map("sigmoid_forward", |v| 1.0 / (1.0 + (-v).exp()))?;
    Ok((a.clone(), SigmoidCache { sig: a }))
}

/// `grad = upstream ⊙ σ(u)(1 − σ(u))`.
pub fn sigmoid_backward(cache: &SigmoidCache, upstream: &Tensor) -> Result<Tensor> {
    if cache.sig.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_backward",
            lhs: cache.sig.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let data: Vec<f64> = cache
        .sig
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(cache.sig.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Train-mode batch normalization; no running statistics. For 4-D input the
/// per-channel statistics pool the batch and both spatial dimensions, so a
/// batch of one image still normalizes over H·W positions. For 2-D input the
/// population is the batch alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormLayer {
    /// `[channels]`
    pub gamma: Tensor,
    /// `[channels]`
    pub beta: Tensor,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BnCache {
    pub(crate) u: Tensor,
    pub(crate) u_hat: Tensor,
    pub(crate) mean: Vec<f64>,
    pub(crate) var: Vec<f64>,
    pub(crate) eps: f64,
}

impl BnCache {
    /// The normalized activations (what the scale coefficient multiplies).
    pub fn u_hat(&self) -> &Tensor {
        &self.u_hat
    }
}

/// Channel of each flat index for the two supported layouts.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ChanMap {
    /// `[N, F]`: channel = feature.
    PerFeature { f: usize },
    /// `[B, C, H, W]`: channel pooled over batch and spatial positions.
    PerChannel { c: usize, hw: usize },
}

impl ChanMap {
    pub(crate) fn for_shape(op: &'static str, shape: &[usize]) -> Result<Self> {
        match shape.len() {
            2 => Ok(ChanMap::PerFeature { f: shape[1] }),
            4 => Ok(ChanMap::PerChannel {
                c: shape[1],
                hw: shape[2] * shape[3],
            }),
            _ => Err(Error::InvalidArgument {
                op,
                msg: format!("normalization expects 2-d or 4-d input, got {shape:?}"),
            }),
        }
    }

    #[inline]
    pub(crate) fn of(&self, i: usize) -> usize {
        match *self {
            ChanMap::PerFeature { f } => i % f,
            ChanMap::PerChannel { c, hw } => (i / hw) % c,
        }
    }

    pub(crate) fn channels(&self) -> usize {
        match *self {
            ChanMap::PerFeature { f } => f,
            ChanMap::PerChannel { c, .. } => c,
        }
    }
}

/// Normalize `u` to zero mean / unit variance per channel (biased variance,
/// epsilon-guarded). Returns the cache that every scale-shift variant —
/// trainable or key-locked — builds on.
pub fn bn_normalize(u: &Tensor, eps: f64) -> Result<BnCache> {
    let cm = ChanMap::for_shape("bn_normalize", u.shape())?;
    let c = cm.channels();
    let pop = u.len() / c;
    if pop == 0 {
        return Err(Error::InvalidArgument {
            op: "bn_normalize",
            msg: "statistic population is empty".to_string(),
        });
    }
    let mut mean = vec![0.0; c];
    for (i, &v) in u.data().iter().enumerate() {
        mean[cm.of(i)] += v;
    }
    for m in &mut mean {
        *m /= pop as f64;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in u.data().iter().enumerate() {
        let d = v - mean[cm.of(i)];
        var[cm.of(i)] += d * d;
    }
    for v in &mut var {
        *v /= pop as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let data: Vec<f64> = u
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[cm.of(i)]) * inv_std[cm.of(i)])
        .collect();
    ensure_finite("bn_normalize", &data)?;
    let u_hat = Tensor::new(u.shape().to_vec(), data)?;
    Ok(BnCache {
        u: u.clone(),
        u_hat,
        mean,
        var,
        eps,
    })
}

/// Apply per-channel scale/shift to normalized activations.
pub(crate) fn scale_shift(cache: &BnCache, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let cm = ChanMap::for_shape("scale_shift", cache.u_hat.shape())?;
    if gamma.shape() != [cm.channels()] || beta.shape() != [cm.channels()] {
        return Err(Error::ShapeMismatch {
            op: "scale_shift",
            lhs: cache.u_hat.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let data: Vec<f64> = cache
        .u_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = cm.of(i);
            gamma.get(ch) * v + beta.get(ch)
        })
        .collect();
    ensure_finite("scale_shift", &data)?;
    Tensor::new(cache.u_hat.shape().to_vec(), data)
}

pub fn batchnorm_forward(layer: &BatchNormLayer, x: &Tensor) -> Result<(Tensor, BnCache)> {
    let cache = bn_normalize(x, layer.eps)?;
    let s = scale_shift(&cache, &layer.gamma, &layer.beta)?;
    Ok((s, cache))
}

/// Shared backward core: gradients of the scale/shift output with respect to
/// the effective per-channel coefficients and the normalization input. The
/// input gradient assembles the three chain-rule terms — through û directly,
/// through the batch variance and through the batch mean.
pub(crate) fn bn_backward_core(
    cache: &BnCache,
    upstream: &Tensor,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if upstream.shape() != cache.u.shape() {
        return Err(Error::ShapeMismatch {
            op: "bn_backward",
            lhs: cache.u.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let cm = ChanMap::for_shape("bn_backward", cache.u.shape())?;
    let c = cm.channels();
    let pop = (cache.u.len() / c) as f64;

    // Per-channel accumulators.
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    let mut grad_var = vec![0.0; c];
    let mut sum_grad_uhat = vec![0.0; c];
    let mut sum_dev = vec![0.0; c];

    let inv_std: Vec<f64> = cache
        .var
        .iter()
        .map(|&v| 1.0 / (v + cache.eps).sqrt())
        .collect();

    for (i, &g) in upstream.data().iter().enumerate() {
        let ch = cm.of(i);
        let uh = cache.u_hat.get(i);
        let dev = cache.u.get(i) - cache.mean[ch];
        let g_uhat = g * gamma.get(ch);
        grad_gamma[ch] += g * uh;
        grad_beta[ch] += g;
        sum_grad_uhat[ch] += g_uhat;
        sum_dev[ch] += dev;
        grad_var[ch] += g_uhat * dev * (-0.5) * inv_std[ch].powi(3);
    }

    let grad_mean: Vec<f64> = (0..c)
        .map(|ch| {
            -sum_grad_uhat[ch] * inv_std[ch] + grad_var[ch] * (-2.0 * sum_dev[ch] / pop)
        })
        .collect();

    let mut grad_x = vec![0.0; cache.u.len()];
    for (i, &g) in upstream.data().iter().enumerate() {
        let ch = cm.of(i);
        let dev = cache.u.get(i) - cache.mean[ch];
        let g_uhat = g * gamma.get(ch);
        grad_x[i] =
            g_uhat * inv_std[ch] + grad_var[ch] * 2.0 * dev / pop + grad_mean[ch] / pop;
    }
    ensure_finite("bn_backward", &grad_x)?;

    Ok((
        Tensor::new(vec![c], grad_gamma)?,
        Tensor::new(vec![c], grad_beta)?,
        Tensor::new(cache.u.shape().to_vec(), grad_x)?,
    ))
}

/// Returns `(grad_gamma, grad_beta, grad_x)`.
pub fn batchnorm_backward(
    layer: &BatchNormLayer,
    cache: &BnCache,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    bn_backward_core(cache, upstream, &layer.gamma)
}

// ---------------------------------------------------------------------------
// Convolution backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub(crate) x: Tensor,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let u = conv2d(x, w, b, stride, pad)?;
    Ok((
        u,
        ConvCache {
            x: x.clone(),
            stride,
            pad,
        },
    ))
}

/// Returns `(grad_w, grad_b, grad_x)`. The weight gradient correlates the
/// upstream signal with the input patches; the input gradient scatters it
/// back through the kernel (transposed correlation).
pub fn conv2d_backward(
    w: &Tensor,
    cache: &ConvCache,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xs = cache.x.shape();
    let ws = w.shape();
    let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (stride, pad) = (cache.stride, cache.pad);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    if upstream.shape() != [bsz, o, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: vec![bsz, o, oh, ow],
            rhs: upstream.shape().to_vec(),
        });
    }

    let mut grad_w = vec![0.0; w.len()];
    let mut grad_b = vec![0.0; o];
    let mut grad_x = vec![0.0; cache.x.len()];

    for bi in 0..bsz {
        for d in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let g = upstream.at4(bi, d, i, j);
                    grad_b[d] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for r in 0..kh {
                            let ih = (i * stride + r) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for s in 0..kw {
                                let iw = (j * stride + s) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi =
                                    ((bi * c + ci) * h + ih as usize) * wd + iw as usize;
                                let wi = ((d * c + ci) * kh + r) * kw + s;
                                grad_w[wi] += g * cache.x.get(xi);
                                grad_x[xi] += g * w.get(wi);
                            }
                        }
                    }
                }
            }
        }
    }
    ensure_finite("conv2d_backward", &grad_w)?;
    ensure_finite("conv2d_backward", &grad_x)?;

    Ok((
        Tensor::new(ws.to_vec(), grad_w)?,
        Tensor::new(vec![o], grad_b)?,
        Tensor::new(xs.to_vec(), grad_x)?,
    ))
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy head
// ---------------------------------------------------------------------------

/// Mean cross-entropy of softmax probabilities against one-hot labels.
/// Returns `(loss, grad_logits, probabilities)` with
/// `grad_logits = (ŷ − y) / N`. Softmax subtracts the row max for stability.
pub fn softmax_ce(logits: &Tensor, y_onehot: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    validate_onehot(y_onehot)?;
    softmax_ce_target(logits, y_onehot)
}

/// Cross-entropy against arbitrary row distributions (used when an attack
/// optimizes a soft label instead of a hard one).
pub fn softmax_ce_soft(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if target.ndim() != 2 {
        return Err(Error::InvalidArgument {
            op: "softmax_ce_soft",
            msg: format!("expected 2-d target, got {:?}", target.shape()),
        });
    }
    let classes = target.shape()[1];
    for row in 0..target.shape()[0] {
        let r = &target.data()[row * classes..(row + 1) * classes];
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument {
                op: "softmax_ce_soft",
                msg: format!("target row {row} is not a distribution"),
            });
        }
    }
    softmax_ce_target(logits, target)
}

fn softmax_ce_target(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_ce",
            lhs: logits.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = vec![0.0; n * classes];
    let mut loss = 0.0;
    for row in 0..n {
        let z = &logits.data()[row * classes..(row + 1) * classes];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in z.iter().enumerate() {
            let e = (v - m).exp();
            probs[row * classes + j] = e;
            sum += e;
        }
        let ln_sum = sum.ln();
        for j in 0..classes {
            probs[row * classes + j] /= sum;
            let t = target.get(row * classes + j);
            if t != 0.0 {
                // -t·log(softmax_j) in the max-shifted stable form
                loss += t * (ln_sum - (z[j] - m));
            }
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_ce" });
    }
    let grad: Vec<f64> = probs
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) / n as f64)
        .collect();
    Ok((
        loss,
        Tensor::new(logits.shape().to_vec(), grad)?,
        Tensor::new(logits.shape().to_vec(), probs)?,
    ))
}

fn validate_onehot(y: &Tensor) -> Result<()> {
    if y.ndim() != 2 {
        return Err(Error::InvalidArgument {
            op: "softmax_ce",
            msg: format!("expected 2-d one-hot labels, got {:?}", y.shape()),
        });
    }
    let classes = y.shape()[1];
    for row in 0..y.shape()[0] {
        let r = &y.data()[row * classes..(row + 1) * classes];
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        let zeros = r.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::NotOneHot { row });
        }
    }
    Ok(())
}

/// One-hot encode labels into `[n, classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument {
                op: "one_hot",
                msg: format!("label {c} out of range for {classes} classes"),
            });
        }
        data[i * classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}
