//! Pluggable denoising: classical filters (median, Gaussian, total
//! variation) plus a shallow self-supervised blind-spot regressor that
//! predicts each pixel from its surroundings with the pixel's own mask zone
//! excluded, so the prediction is exactly independent of the masked values.

use crate::fieldstore::{FrameStack, ScalarField};
use crate::noisegen::median3;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    /// Exclude only the pixel itself.
    Point,
    /// Exclude a 1 x mask_width row segment centered on the pixel.
    Horizontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    MedianSpatial,
    MedianTemporal {
        #[serde(default = "default_window")]
        window: usize,
    },
    GaussianBlur {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    TotalVariation {
        #[serde(default = "default_tv_weight")]
        weight: f64,
        #[serde(default = "default_tv_iters")]
        iters: usize,
    },
    BlindSpot {
        #[serde(default = "default_patch_radius")]
        patch_radius: usize,
        #[serde(default = "default_mask_shape")]
        mask_shape: MaskShape,
        #[serde(default = "default_mask_width")]
        mask_width: usize,
        #[serde(default = "default_ridge_lambda")]
        ridge_lambda: f64,
        #[serde(default = "default_max_samples")]
        max_samples: usize,
    },
}

fn default_window() -> usize {
    3
}
fn default_sigma() -> f64 {
    0.8
}
fn default_tv_weight() -> f64 {
    0.02
}
fn default_tv_iters() -> usize {
    50
}
fn default_patch_radius() -> usize {
    3
}
fn default_mask_shape() -> MaskShape {
    MaskShape::Horizontal
}
fn default_mask_width() -> usize {
    7
}
fn default_ridge_lambda() -> f64 {
    1e-3
}
fn default_max_samples() -> usize {
    50_000
}

impl DenoiserSpec {
    pub fn median_temporal() -> Self {
        DenoiserSpec::MedianTemporal {
            window: default_window(),
        }
    }

    pub fn gaussian_blur() -> Self {
        DenoiserSpec::GaussianBlur {
            sigma: default_sigma(),
        }
    }

    pub fn total_variation() -> Self {
        DenoiserSpec::TotalVariation {
            weight: default_tv_weight(),
            iters: default_tv_iters(),
        }
    }

    pub fn blind_spot() -> Self {
        DenoiserSpec::BlindSpot {
            patch_radius: default_patch_radius(),
            mask_shape: default_mask_shape(),
            mask_width: default_mask_width(),
            ridge_lambda: default_ridge_lambda(),
            max_samples: default_max_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DenoiserSpec::Identity | DenoiserSpec::MedianSpatial => Ok(()),
            DenoiserSpec::MedianTemporal { window } => {
                if window == 0 || window % 2 == 0 {
                    return Err(Error::invalid("median_temporal window must be odd"));
                }
                Ok(())
            }
            DenoiserSpec::GaussianBlur { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::invalid("blur_sigma must be positive"));
                }
                Ok(())
            }
            DenoiserSpec::TotalVariation { weight, iters } => {
                if !(weight > 0.0) {
                    return Err(Error::invalid("tv_weight must be positive"));
                }
                if iters == 0 {
                    return Err(Error::invalid("tv iteration count must be positive"));
                }
                Ok(())
            }
            DenoiserSpec::BlindSpot {
                patch_radius,
                mask_shape,
                mask_width,
                ridge_lambda,
                max_samples,
            } => {
                if mask_width % 2 == 0 {
                    return Err(Error::invalid("mask_width must be odd"));
                }
                let extent = match mask_shape {
                    MaskShape::Point => 0,
                    MaskShape::Horizontal => mask_width / 2,
                };
                if patch_radius < extent.max(1) {
                    return Err(Error::invalid(
                        "patch_radius must cover the mask extent (and be at least 1)",
                    ));
                }
                if !(ridge_lambda >= 0.0) {
                    return Err(Error::invalid("ridge_lambda must be non-negative"));
                }
                if max_samples == 0 {
                    return Err(Error::invalid("max_samples must be positive"));
                }
                Ok(())
            }
        }
    }
}

/// Fitted blind-spot regressor. `weights` covers the full
/// `(2r+1) x (2r+1)` patch in row-major order; masked positions hold an
/// exact 0.0 and are never read during application.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindSpotModel {
    pub patch_radius: usize,
    pub mask_shape: MaskShape,
    pub mask_width: usize,
    pub ridge_lambda: f64,
    pub weights: Vec<f64>,
    pub n_samples: usize,
    pub fit_rmse: f64,
}

impl BlindSpotModel {
    pub fn weight_at(&self, dy: i64, dx: i64) -> f64 {
        let r = self.patch_radius as i64;
        assert!(dy.abs() <= r && dx.abs() <= r, "offset outside patch");
        let side = 2 * self.patch_radius + 1;
        self.weights[((dy + r) as usize) * side + (dx + r) as usize]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("serialize model: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("parse model: {e}")))
    }
}

fn masked(shape: MaskShape, mask_width: usize, dy: i64, dx: i64) -> bool {
    match shape {
        MaskShape::Point => dy == 0 && dx == 0,
        MaskShape::Horizontal => dy == 0 && dx.unsigned_abs() as usize <= mask_width / 2,
    }
}

fn free_offsets(patch_radius: usize, shape: MaskShape, mask_width: usize) -> Vec<(i64, i64)> {
    let r = patch_radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if !masked(shape, mask_width, dy, dx) {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Fits the ridge predictor of the center pixel from the unmasked patch
/// positions, pooling interior pixels of every frame (subsampled to
/// `max_samples` with the given seed).
pub fn fit_blind_spot(stack: &FrameStack, spec: &DenoiserSpec, seed: u64) -> Result<BlindSpotModel> {
    spec.validate()?;
    let DenoiserSpec::BlindSpot {
        patch_radius,
        mask_shape,
        mask_width,
        ridge_lambda,
        max_samples,
    } = *spec
    else {
        return Err(Error::invalid("fit_blind_spot requires a blind_spot spec"));
    };
    let (h, w) = stack.frame_shape();
    let r = patch_radius;
    if h < 2 * r + 1 || w < 2 * r + 1 {
        return Err(Error::invalid(format!(
            "frames ({h}x{w}) smaller than the {0}x{0} patch",
            2 * r + 1
        )));
    }

    let offsets = free_offsets(r, mask_shape, mask_width);
    let m = offsets.len();

    // Interior centers across all frames, subsampled without replacement.
    let per_frame = (h - 2 * r) * (w - 2 * r);
    let total = per_frame * stack.frames().len();
    let picks: Vec<usize> = if total <= max_samples {
        (0..total).collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..total).collect();
        all.shuffle(&mut rng);
        all.truncate(max_samples);
        all
    };

    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut y_sq = 0.0;
    let mut x = vec![0.0; m];
    for &pick in &picks {
        let f = pick / per_frame;
        let rem = pick % per_frame;
        let y = r + rem / (w - 2 * r);
        let xx = r + rem % (w - 2 * r);
        let d = stack.frames()[f].data();
        for (j, &(dy, dx)) in offsets.iter().enumerate() {
            x[j] = d[((y as i64 + dy) as usize, (xx as i64 + dx) as usize)];
        }
        let target = d[(y, xx)];
        for a in 0..m {
            for b in a..m {
                gram[(a, b)] += x[a] * x[b];
            }
            rhs[a] += x[a] * target;
        }
        y_sq += target * target;
    }
    let n = picks.len() as f64;
    if n == 0.0 {
        return Err(Error::invalid("no interior pixels to fit on"));
    }
    for a in 0..m {
        for b in a..m {
            let v = gram[(a, b)] / n;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        rhs[a] /= n;
        gram[(a, a)] += ridge_lambda;
    }

    let chol = Cholesky::new(gram.clone()).ok_or_else(|| {
        Error::numeric("singular normal equations; increase ridge_lambda")
    })?;
    let beta = chol.solve(&rhs);

    // Training RMSE from the quadratic form (no second data pass):
    // E[(y - x'b)^2] = E[y^2] - 2 b'rhs + b'(G - lambda I)b.
    let mut quad = 0.0;
    for a in 0..m {
        for b in 0..m {
            let g = gram[(a, b)] - if a == b { ridge_lambda } else { 0.0 };
            quad += beta[a] * g * beta[b];
        }
    }
    let mse = (y_sq / n - 2.0 * beta.dot(&rhs) + quad).max(0.0);

    let side = 2 * r + 1;
    let mut weights = vec![0.0; side * side];
    for (j, &(dy, dx)) in offsets.iter().enumerate() {
        weights[((dy + r as i64) as usize) * side + (dx + r as i64) as usize] = beta[j];
    }

    Ok(BlindSpotModel {
        patch_radius: r,
        mask_shape,
        mask_width,
        ridge_lambda,
        weights,
        n_samples: picks.len(),
        fit_rmse: mse.sqrt(),
    })
}

/// Applies a fitted blind-spot model. Out-of-bounds offsets are dropped
/// (never clamped, so the mask guarantee holds at borders too) and the
/// prediction is rescaled by the missing weight mass; a near-zero usable
/// weight sum falls back to the mean of the visible patch values.
pub fn apply_blind_spot(stack: &FrameStack, model: &BlindSpotModel) -> Result<FrameStack> {
    let r = model.patch_radius;
    let side = 2 * r + 1;
    if model.weights.len() != side * side {
        return Err(Error::invalid("weight layout does not match patch_radius"));
    }
    let offsets: Vec<(i64, i64, f64)> = free_offsets(r, model.mask_shape, model.mask_width)
        .into_iter()
        .map(|(dy, dx)| {
            (
                dy,
                dx,
                model.weights[((dy + r as i64) as usize) * side + (dx + r as i64) as usize],
            )
        })
        .collect();
    let s_all: f64 = offsets.iter().map(|&(_, _, w)| w).sum();

    let frames: Result<Vec<ScalarField>> = stack
        .frames()
        .par_iter()
        .map(|frame| {
            let (h, w) = frame.shape();
            let d = frame.data();
            let mut out = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut s_used = 0.0;
                    let mut sum_vals = 0.0;
                    let mut n_used = 0usize;
                    for &(dy, dx, wt) in &offsets {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let v = d[(yy as usize, xx as usize)];
                        acc += wt * v;
                        s_used += wt;
                        sum_vals += v;
                        n_used += 1;
                    }
                    out[(y, x)] = if s_used.abs() < 1e-3 || n_used == 0 {
                        if n_used == 0 {
                            d[(y, x)]
                        } else {
                            sum_vals / n_used as f64
                        }
                    } else {
                        acc * (s_all / s_used)
                    };
                }
            }
            frame.like(out)
        })
        .collect();
    let mut result = FrameStack::new(frames?, stack.channels(), Some(stack.times().to_vec()))?;
    result.meta = stack.meta.clone();
    Ok(result)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn gaussian_blur_frame(frame: &ScalarField, kernel: &[f64]) -> Result<ScalarField> {
    let (h, w) = frame.shape();
    let d = frame.data();
    let radius = kernel.len() as i64 / 2;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * d[(y, xx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[(yy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    frame.like(out)
}

/// Rudin–Osher–Fatemi denoising by the fixed-point dual projection scheme:
/// `iters` iterations with step 1/8, output `u = f - weight * div(p)`.
fn tv_frame(frame: &ScalarField, weight: f64, iters: usize) -> Result<ScalarField> {
    let (h, w) = frame.shape();
    let f = frame.data();
    let tau = 0.125;
    let mut px = Array2::<f64>::zeros((h, w));
    let mut py = Array2::<f64>::zeros((h, w));
    let mut div = Array2::<f64>::zeros((h, w));
    let mut gx = Array2::<f64>::zeros((h, w));
    let mut gy = Array2::<f64>::zeros((h, w));

    let divergence = |px: &Array2<f64>, py: &Array2<f64>, div: &mut Array2<f64>| {
        for y in 0..h {
            for x in 0..w {
                let dx = if x == 0 {
                    px[(y, 0)]
                } else if x == w - 1 {
                    -px[(y, w - 2)]
                } else {
                    px[(y, x)] - px[(y, x - 1)]
                };
                let dy = if y == 0 {
                    py[(0, x)]
                } else if y == h - 1 {
                    -py[(h - 2, x)]
                } else {
                    py[(y, x)] - py[(y - 1, x)]
                };
                div[(y, x)] = dx + dy;
            }
        }
    };

    for _ in 0..iters {
        divergence(&px, &py, &mut div);
        // Forward-difference gradient of (div p - f / weight), Neumann edges.
        for y in 0..h {
            for x in 0..w {
                let g = div[(y, x)] - f[(y, x)] / weight;
                gx[(y, x)] = if x + 1 < w {
                    (div[(y, x + 1)] - f[(y, x + 1)] / weight) - g
                } else {
                    0.0
                };
                gy[(y, x)] = if y + 1 < h {
                    (div[(y + 1, x)] - f[(y + 1, x)] / weight) - g
                } else {
                    0.0
                };
            }
        }
        for y in 0..h {
            for x in 0..w {
                let norm = (gx[(y, x)] * gx[(y, x)] + gy[(y, x)] * gy[(y, x)]).sqrt();
                let denom = 1.0 + tau * norm;
                px[(y, x)] = (px[(y, x)] + tau * gx[(y, x)]) / denom;
                py[(y, x)] = (py[(y, x)] + tau * gy[(y, x)]) / denom;
            }
        }
    }
    divergence(&px, &py, &mut div);
    frame.like(f - &div.mapv(|v| v * weight))
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_temporal(stack: &FrameStack, window: usize) -> Result<FrameStack> {
    let c = stack.channels();
    let t_count = stack.frames().len() / c;
    let (h, w) = stack.frame_shape();
    let half = window / 2;
    let frames: Result<Vec<ScalarField>> = (0..stack.frames().len())
        .into_par_iter()
        .map(|idx| {
            let t = idx / c;
            let ch = idx % c;
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(t_count - 1);
            let sources: Vec<&ScalarField> =
                (lo..=hi).map(|tt| &stack.frames()[tt * c + ch]).collect();
            let mut out = Array2::zeros((h, w));
            let mut vals = vec![0.0; sources.len()];
            for y in 0..h {
                for x in 0..w {
                    for (k, s) in sources.iter().enumerate() {
                        vals[k] = s.data()[(y, x)];
                    }
                    out[(y, x)] = median_of(&mut vals);
                }
            }
            stack.frames()[idx].like(out)
        })
        .collect();
    let mut result = FrameStack::new(frames?, c, Some(stack.times().to_vec()))?;
    result.meta = stack.meta.clone();
    Ok(result)
}

/// Runs one denoiser over the whole stack. Identity is bit-exact; all
/// variants preserve shape and are deterministic for a given seed.
pub fn denoise_stack(stack: &FrameStack, spec: &DenoiserSpec, seed: u64) -> Result<FrameStack> {
    spec.validate()?;
    match spec {
        DenoiserSpec::Identity => Ok(stack.clone()),
        DenoiserSpec::MedianSpatial => {
            let frames: Result<Vec<ScalarField>> = stack
                .frames()
                .par_iter()
                .map(|f| Ok(median3(f)))
                .collect();
            let mut out = FrameStack::new(frames?, stack.channels(), Some(stack.times().to_vec()))?;
            out.meta = stack.meta.clone();
            Ok(out)
        }
        DenoiserSpec::MedianTemporal { window } => median_temporal(stack, *window),
        DenoiserSpec::GaussianBlur { sigma } => {
            let kernel = gaussian_kernel(*sigma);
            let frames: Result<Vec<ScalarField>> = stack
                .frames()
                .par_iter()
                .map(|f| gaussian_blur_frame(f, &kernel))
                .collect();
            let mut out = FrameStack::new(frames?, stack.channels(), Some(stack.times().to_vec()))?;
            out.meta = stack.meta.clone();
            Ok(out)
        }
        DenoiserSpec::TotalVariation { weight, iters } => {
            let frames: Result<Vec<ScalarField>> = stack
                .frames()
                .par_iter()
                .map(|f| tv_frame(f, *weight, *iters))
                .collect();
            let mut out = FrameStack::new(frames?, stack.channels(), Some(stack.times().to_vec()))?;
            out.meta = stack.meta.clone();
            Ok(out)
        }
        DenoiserSpec::BlindSpot { .. } => {
            let model = fit_blind_spot(stack, spec, seed)?;
            apply_blind_spot(stack, &model)
        }
    }
}
