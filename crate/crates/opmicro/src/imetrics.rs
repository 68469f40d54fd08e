//! Image fidelity metrics (MSE, PSNR, SSIM) and the circular spatial
//! autocorrelation used to characterize pattern length scales.

use crate::fft::Fft2;
use crate::fieldstore::ScalarField;
use crate::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;

fn check_same_shape(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error between two equally shaped fields.
pub fn mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.as_slice().len() as f64;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB for the given dynamic `range`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ScalarField, b: &ScalarField, range: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::invalid("psnr range must be positive"));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / err).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

// Separable Gaussian blur over the full field; only windows fully inside the
// image are consumed downstream, so border handling here is irrelevant as
// long as it is consistent. Zero padding keeps it simple.
fn blur_full(src: &Array2<f64>, kernel: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = src.dim();
    let r = SSIM_WINDOW as i64 / 2;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let xx = x as i64 + i as i64 - r;
                if (0..w as i64).contains(&xx) {
                    acc += kv * src[(y, xx as usize)];
                }
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let yy = y as i64 + i as i64 - r;
                if (0..h as i64).contains(&yy) {
                    acc += kv * tmp[(yy as usize, x)];
                }
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the valid region only (centers whose window fits inside
/// the image). Requires both dimensions to be at least the window size.
pub fn ssim(a: &ScalarField, b: &ScalarField, range: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if !(range > 0.0) {
        return Err(Error::invalid("ssim range must be positive"));
    }
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = ssim_kernel();
    let da = a.data();
    let db = b.data();
    let aa = da * da;
    let bb = db * db;
    let ab = da * db;
    let mu_a = blur_full(da, &kernel);
    let mu_b = blur_full(db, &kernel);
    let m_aa = blur_full(&aa, &kernel);
    let m_bb = blur_full(&bb, &kernel);
    let m_ab = blur_full(&ab, &kernel);

    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let r = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in r..h - r {
        for x in r..w - r {
            let ma = mu_a[(y, x)];
            let mb = mu_b[(y, x)];
            let va = m_aa[(y, x)] - ma * ma;
            let vb = m_bb[(y, x)] - mb * mb;
            let cov = m_ab[(y, x)] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += s;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Circular autocorrelation of the mean-subtracted field, computed via FFT
/// and normalized so the zero-lag value is exactly 1. Constant inputs have
/// no correlation structure and are rejected.
pub fn autocorr2d(a: &ScalarField) -> Result<ScalarField> {
    let (h, w) = a.shape();
    let mean = a.mean();
    let mut buf: Vec<Complex64> = a
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v - mean, 0.0))
        .collect();
    let mut fft = Fft2::new(h, w);
    fft.forward(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    fft.inverse(&mut buf);
    // Zero-lag value equals N * variance; compare the implied standard
    // deviation against the field scale so constant inputs are rejected
    // even when the subtracted mean carries rounding error.
    let r0 = buf[0].re;
    let n = (h * w) as f64;
    let scale = 1.0 + mean.abs();
    if !r0.is_finite() || (r0 / n).sqrt() <= 1e-12 * scale {
        return Err(Error::numeric("autocorrelation of a constant field is undefined"));
    }
    let data = Array2::from_shape_vec((h, w), buf.iter().map(|v| v.re / r0).collect())
        .expect("same size");
    ScalarField::new(data)
}
