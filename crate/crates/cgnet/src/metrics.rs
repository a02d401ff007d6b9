//! PSNR, SSIM and the differentiable negative-PSNR training loss.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Stabilizer in the PSNR denominator and the report cap: identical images
/// land exactly on 10 * log10(1 / 1e-8) = 80 dB.
pub const PSNR_EPS: f64 = 1e-8;
pub const PSNR_CAP_DB: f64 = 80.0;

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x.into_f64() - y.into_f64();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// Peak signal-to-noise ratio in decibels, capped at 80 dB for reporting.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let err = mse(a, b)?;
    Ok((10.0 * ((peak * peak) / (err + PSNR_EPS)).log10()).min(PSNR_CAP_DB))
}

/// Differentiable -mean(PSNR) over the batch and over heads, peak 1.
///
/// -PSNR_i = 10 log10(MSE_i + eps), so the loss reduces to
/// (10 / ln 10) * mean_i ln(MSE_i + eps) averaged across heads.
pub fn neg_psnr_loss<T: Scalar>(preds: &[Tensor<T>], target: &Tensor<T>) -> Result<Tensor<T>> {
    if preds.is_empty() {
        return Err(Error::arg("neg_psnr_loss", "no predictions"));
    }
    let n = target.shape().n;
    let mut total: Option<Tensor<T>> = None;
    for pred in preds {
        if pred.shape() != target.shape() {
            return Err(Error::shape(
                "neg_psnr_loss",
                format!("{} vs {}", pred.shape(), target.shape()),
            ));
        }
        let diff = ops::sub(pred, target)?;
        let sq = ops::mul(&diff, &diff)?;
        let per_image = ops::mean_per_image(&sq)?;
        let shifted = ops::affine(&per_image, T::one(), T::from_f64(PSNR_EPS))?;
        let logs = ops::ln(&shifted)?;
        let head_sum = ops::sum_all(&logs)?;
        total = Some(match total {
            Some(t) => ops::add(&t, &head_sum)?,
            None => head_sum,
        });
    }
    let scale = 10.0 / (std::f64::consts::LN_10 * n as f64 * preds.len() as f64);
    ops::affine(&total.expect("non-empty preds"), T::from_f64(scale), T::zero())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-window Gaussian filter of an (h, w) plane.
fn gauss_filter(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, peak 1.0, averaged over channels and batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{} vs {}", s, b.shape()),
        ));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("extents {}x{} below the {} window", s.h, s.w, SSIM_WINDOW),
        ));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = s.h * s.w;
    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0;
    for plane_idx in 0..s.n * s.c {
        let pa: Vec<f64> = ad[plane_idx * hw..(plane_idx + 1) * hw]
            .iter()
            .map(|v| v.into_f64())
            .collect();
        let pb: Vec<f64> = bd[plane_idx * hw..(plane_idx + 1) * hw]
            .iter()
            .map(|v| v.into_f64())
            .collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, oh, ow) = gauss_filter(&pa, s.h, s.w);
        let (mu_b, _, _) = gauss_filter(&pb, s.h, s.w);
        let (m_aa, _, _) = gauss_filter(&paa, s.h, s.w);
        let (m_bb, _, _) = gauss_filter(&pbb, s.h, s.w);
        let (m_ab, _, _) = gauss_filter(&pab, s.h, s.w);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}
