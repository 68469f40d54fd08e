//! Thin 2-D FFT layer over `rustfft` with cached plans and scratch buffers.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached forward/inverse plans for one `h x w` grid.
///
/// Buffers are row-major with `w` contiguous columns. Forward transforms are
/// unnormalized; `inverse` divides by `h * w` so a round trip is the identity
/// up to rounding.
pub struct Fft2 {
    h: usize,
    w: usize,
    fwd_w: Arc<dyn Fft<f64>>,
    inv_w: Arc<dyn Fft<f64>>,
    fwd_h: Arc<dyn Fft<f64>>,
    inv_h: Arc<dyn Fft<f64>>,
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "empty FFT grid");
        let mut planner = FftPlanner::new();
        let fwd_w = planner.plan_fft_forward(w);
        let inv_w = planner.plan_fft_inverse(w);
        let fwd_h = planner.plan_fft_forward(h);
        let inv_h = planner.plan_fft_inverse(h);
        let scratch_len = fwd_w
            .get_inplace_scratch_len()
            .max(inv_w.get_inplace_scratch_len())
            .max(fwd_h.get_inplace_scratch_len())
            .max(inv_h.get_inplace_scratch_len());
        Fft2 {
            h,
            w,
            fwd_w,
            inv_w,
            fwd_h,
            inv_h,
            transposed: vec![Complex64::default(); h * w],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    fn transform(&mut self, buf: &mut [Complex64], forward: bool) {
        assert_eq!(buf.len(), self.h * self.w, "buffer/grid size mismatch");
        let (row_plan, col_plan) = if forward {
            (&self.fwd_w, &self.fwd_h)
        } else {
            (&self.inv_w, &self.inv_h)
        };
        row_plan.process_with_scratch(buf, &mut self.scratch);
        for i in 0..self.h {
            for j in 0..self.w {
                self.transposed[j * self.h + i] = buf[i * self.w + j];
            }
        }
        col_plan.process_with_scratch(&mut self.transposed, &mut self.scratch);
        for j in 0..self.w {
            for i in 0..self.h {
                buf[i * self.w + j] = self.transposed[j * self.h + i];
            }
        }
    }

    /// In-place forward 2-D FFT (unnormalized).
    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    /// In-place inverse 2-D FFT, normalized by `1 / (h * w)`.
    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.transform(buf, false);
        let norm = 1.0 / (self.h * self.w) as f64;
        for v in buf.iter_mut() {
            *v *= norm;
        }
    }
}

/// Angular wavenumbers `2 pi m / length` in FFT order (signed indices).
pub fn wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / length;
    (0..n)
        .map(|i| {
            let m = if i <= n / 2 {
                i as f64
            } else {
                i as f64 - n as f64
            };
            base * m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn round_trip_is_identity() {
        let (h, w) = (16, 24);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let orig: Vec<Complex64> = (0..h * w)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, 0.0))
            .collect();
        let mut buf = orig.clone();
        let mut fft = Fft2::new(h, w);
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        for (a, b) in orig.iter().zip(&buf) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn pure_mode_lands_on_single_bin() {
        let (h, w) = (8, 8);
        let mut buf = vec![Complex64::default(); h * w];
        for i in 0..h {
            for j in 0..w {
                let phase = 2.0 * std::f64::consts::PI * (2 * j) as f64 / w as f64;
                buf[i * w + j] = Complex64::new(phase.cos(), 0.0);
            }
        }
        let mut fft = Fft2::new(h, w);
        fft.forward(&mut buf);
        // cos(2 pi * 2 x / w) concentrates at (0, 2) and (0, w-2) with weight hw/2.
        let expected = (h * w) as f64 / 2.0;
        assert!((buf[2].re - expected).abs() < 1e-9);
        assert!((buf[w - 2].re - expected).abs() < 1e-9);
        let spurious: f64 = buf
            .iter()
            .enumerate()
            .filter(|(idx, _)| *idx != 2 && *idx != w - 2)
            .map(|(_, v)| v.norm())
            .sum();
        assert!(spurious < 1e-9);
    }

    #[test]
    fn wavenumbers_signed_order() {
        let k = wavenumbers(8, 1.0);
        let base = 2.0 * std::f64::consts::PI;
        assert!((k[0]).abs() < 1e-15);
        assert!((k[1] - base).abs() < 1e-12);
        assert!((k[4] - 4.0 * base).abs() < 1e-12);
        assert!((k[5] + 3.0 * base).abs() < 1e-12);
        assert!((k[7] + base).abs() < 1e-12);
    }
}
