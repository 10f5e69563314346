//! Minimal dense tensor: row-major `f64` storage with the arithmetic the
//! layers need. Every public operation shape-checks its inputs and rejects
//! non-finite results instead of letting NaN/Inf propagate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction kinds for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeLen {
                op: "Tensor::new",
                shape,
                len: data.len(),
            });
        }
        ensure_finite("Tensor::new", &data)?;
        Ok(Self { shape, data })
    }

    /// Trusted constructor for data the crate itself produced. Debug builds
    /// still verify the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        let t = Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        };
        ensure_finite("Tensor::full", &t.data)?;
        Ok(t)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "Tensor::item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same data, new shape. Round-trips exactly: reshape never touches data.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeLen {
                op: "Tensor::reshape",
                shape,
                len: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix("matmul", self)?;
        let (k2, n) = as_matrix("matmul", rhs)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..k {
                let a = self.data[i * k + t];
                let row = &rhs.data[t * n..(t + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        ensure_finite("matmul", &out)?;
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix("transpose", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("sub", rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("mul", rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map("scale", |a| a * s)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&a| f(a)).collect();
        ensure_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn zip(&self, op: &'static str, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let v: f64 = self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "dot" });
        }
        Ok(v)
    }

    /// Outer product of two vectors: `[m] x [n] -> [m, n]`.
    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor> {
        let m = as_vector("outer", self)?;
        let n = as_vector("outer", rhs)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.data[i] * rhs.data[j];
            }
        }
        ensure_finite("outer", &out)?;
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Reduce over `axes` (removed from the output shape).
    pub fn reduce(&self, axes: &[usize], kind: Reduction) -> Result<Tensor> {
        let nd = self.ndim();
        let mut reduce_mask = vec![false; nd];
        for &ax in axes {
            if ax >= nd {
                return Err(Error::InvalidArgument {
                    op: "reduce",
                    msg: format!("axis {ax} out of range for shape {:?}", self.shape),
                });
            }
            reduce_mask[ax] = true;
        }
        let out_shape: Vec<usize> = (0..nd)
            .filter(|&d| !reduce_mask[d])
            .map(|d| self.shape[d])
            .collect();
        let out_len: usize = out_shape.iter().product();
        let pop: usize = (0..nd)
            .filter(|&d| reduce_mask[d])
            .map(|d| self.shape[d])
            .product();
        if pop == 0 || self.is_empty() {
            return Err(Error::InvalidArgument {
                op: "reduce",
                msg: "cannot reduce over an empty population".to_string(),
            });
        }

        let init = match kind {
            Reduction::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_len];

        // Strides of the output index within the input iteration order.
        let mut out_strides = vec![0usize; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            if !reduce_mask[d] {
                out_strides[d] = acc;
                acc *= self.shape[d];
            }
        }

        let mut idx = vec![0usize; nd];
        for &v in &self.data {
            let o: usize = (0..nd)
                .filter(|&d| !reduce_mask[d])
                .map(|d| idx[d] * out_strides[d])
                .sum();
            match kind {
                Reduction::Sum | Reduction::Mean => out[o] += v,
                Reduction::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
            }
            // odometer increment
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if kind == Reduction::Mean {
            for v in &mut out {
                *v /= pop as f64;
            }
        }
        ensure_finite("reduce", &out)?;
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Value at a flat index. Panics when out of bounds, like slice indexing.
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Overwrite one coordinate; the finite-values invariant still holds.
    pub fn set(&mut self, i: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "Tensor::set" });
        }
        self.data[i] = v;
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat offset of a 4-D index; callers guarantee bounds.
    #[inline]
    pub(crate) fn at4(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> f64 {
        let (_, s1, s2, s3) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((i0 * s1 + i1) * s2 + i2) * s3 + i3]
    }
}

/// 2-D cross-correlation (no kernel flip) of `x: [B,C,H,W]` with
/// `w: [O,C,K,K]` plus per-channel bias; out-of-bounds reads are zero.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = expect_ndim("conv2d", x, 4)?;
    let ws = expect_ndim("conv2d", w, 4)?;
    let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if c != cw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if b.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: ws.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if stride < 1 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: "stride must be >= 1".to_string(),
        });
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let mut out = vec![0.0; bsz * o * oh * ow];
    for bi in 0..bsz {
        for d in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[d];
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
                                acc += w.at4(d, ci, r, s) * x.at4(bi, ci, ih as usize, iw as usize);
                            }
                        }
                    }
                    out[((bi * o + d) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    ensure_finite("conv2d", &out)?;
    Ok(Tensor::from_parts(vec![bsz, o, oh, ow], out))
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = expect_ndim(op, t, 2)?;
    Ok((s[0], s[1]))
}

fn as_vector(op: &'static str, t: &Tensor) -> Result<usize> {
    let s = expect_ndim(op, t, 1)?;
    Ok(s[0])
}

fn expect_ndim<'t>(op: &'static str, t: &'t Tensor, nd: usize) -> Result<&'t [usize]> {
    if t.ndim() != nd {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected {nd}-d tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(t.shape())
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Tensor::new(raw.shape, raw.data).map_err(serde::de::Error::custom)
    }
}
