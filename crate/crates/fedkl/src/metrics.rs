//! Reconstruction-quality scoring: MSE, PSNR and SSIM on the 0–255 pixel
//! scale. Engine tensors live in [0,1]; scale them at this boundary (or use
//! [`score_unit_pair`]) so the 255² PSNR numerator stays consistent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXEL_MAX: f64 = 255.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * PIXEL_MAX) * (0.01 * PIXEL_MAX);
const SSIM_C2: f64 = (0.03 * PIXEL_MAX) * (0.03 * PIXEL_MAX);

/// Scores for one reconstructed/true image pair. `psnr_db` is `None` when
/// the images are identical (MSE 0 — infinite ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub shape: Vec<usize>,
    pub value_range: f64,
}

/// Mean of squared per-pixel differences. Inputs are expected on the 0–255
/// scale; any matching shapes are accepted.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument {
            op: "mse",
            msg: "empty image".to_string(),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(255²/mse)`; identical images (mse 0) report `+∞`.
pub fn psnr(mse_value: f64) -> Result<f64> {
    if mse_value < 0.0 || !mse_value.is_finite() {
        return Err(Error::InvalidArgument {
            op: "psnr",
            msg: format!("mse must be a finite non-negative number, got {mse_value}"),
        });
    }
    if mse_value == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PIXEL_MAX * PIXEL_MAX / mse_value).log10())
}

/// Windowed SSIM: 8×8 uniform windows at stride 1, per channel, mean over
/// windows and channels. Inputs on the 0–255 scale, shaped `[h, w]` or
/// `[c, h, w]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (c, h, w) = match a.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::InvalidArgument {
                op: "ssim",
                msg: format!("expected [h,w] or [c,h,w], got {other:?}"),
            })
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            op: "ssim",
            msg: format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let npix = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        let plane_a = &a.data()[ch * h * w..(ch + 1) * h * w];
        let plane_b = &b.data()[ch * h * w..(ch + 1) * h * w];
        for top in 0..=(h - SSIM_WINDOW) {
            for left in 0..=(w - SSIM_WINDOW) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (top + dy) * w + left;
                    for dx in 0..SSIM_WINDOW {
                        let x = plane_a[row + dx];
                        let y = plane_b[row + dx];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let mu_a = sa / npix;
                let mu_b = sb / npix;
                let var_a = saa / npix - mu_a * mu_a;
                let var_b = sbb / npix - mu_b * mu_b;
                let cov = sab / npix - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Score a pair of engine-scale images (values in [0,1]); both are mapped to
/// 0–255 before the metrics are applied.
pub fn score_unit_pair(truth: &Tensor, recon: &Tensor) -> Result<MetricReport> {
    let t = truth.scale(PIXEL_MAX)?;
    let r = recon.scale(PIXEL_MAX)?;
    let m = mse(&t, &r)?;
    let p = psnr(m)?;
    let shape: Vec<usize> = truth.shape().to_vec();
    let ss = match shape.len() {
        4 if shape[0] == 1 => ssim(&t.reshape(shape[1..].to_vec())?, &r.reshape(shape[1..].to_vec())?)?,
        _ => ssim(&t, &r)?,
    };
    Ok(MetricReport {
        mse: m,
        psnr_db: if p.is_finite() { Some(p) } else { None },
        ssim: ss,
        shape,
        value_range: PIXEL_MAX,
    })
}
