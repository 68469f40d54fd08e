//! Seeded corruption of image stacks: Gaussian, Poisson, impulse, and the
//! composite recipe, plus the shared 3x3 median filter.
//!
//! Every frame gets independent ChaCha substreams (one per noise stage), so
//! corruption is reproducible per seed and frames may run in parallel.

use crate::fieldstore::{FrameStack, ScalarField};
use crate::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Poisson,
    Impulse,
    Composite,
}

/// Corruption recipe. `gaussian_rel` scales the per-frame standard deviation
/// of the clean frame; `poisson_lambda` is the count scale of the
/// lambda-normalized Poisson channel `Pois(v * lambda) / lambda`;
/// `impulse_p` is the salt-and-pepper hit probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    #[serde(default)]
    pub gaussian_rel: f64,
    #[serde(default = "default_lambda")]
    pub poisson_lambda: f64,
    #[serde(default)]
    pub impulse_p: f64,
    pub post_median: bool,
    pub clip: (f64, f64),
}

fn default_lambda() -> f64 {
    1e4
}

pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

impl NoiseSpec {
    pub fn gaussian(rel: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Gaussian,
            gaussian_rel: rel,
            poisson_lambda: default_lambda(),
            impulse_p: 0.0,
            post_median: false,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn poisson(lambda: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Poisson,
            gaussian_rel: 0.0,
            poisson_lambda: lambda,
            impulse_p: 0.0,
            post_median: false,
            clip: DEFAULT_CLIP,
        }
    }

    /// Impulse noise is followed by the 3x3 median by default.
    pub fn impulse(p: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Impulse,
            gaussian_rel: 0.0,
            poisson_lambda: default_lambda(),
            impulse_p: p,
            post_median: true,
            clip: DEFAULT_CLIP,
        }
    }

    /// Composite: impulse, then Poisson, then Gaussian, then the median.
    pub fn composite(rel: f64, lambda: f64, p: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Composite,
            gaussian_rel: rel,
            poisson_lambda: lambda,
            impulse_p: p,
            post_median: true,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        self.clip = (lo, hi);
        self
    }

    pub fn with_post_median(mut self, on: bool) -> Self {
        self.post_median = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_rel < 0.0 || !self.gaussian_rel.is_finite() {
            return Err(Error::invalid("gaussian_rel must be a finite non-negative value"));
        }
        if !(self.poisson_lambda > 0.0) {
            return Err(Error::invalid("poisson_lambda must be positive"));
        }
        if !(0.0..=1.0).contains(&self.impulse_p) {
            return Err(Error::invalid("impulse_p must lie in [0,1]"));
        }
        if !(self.clip.0 < self.clip.1) {
            return Err(Error::invalid("clip.lo must be below clip.hi"));
        }
        Ok(())
    }

    fn uses_impulse(&self) -> bool {
        matches!(self.family, NoiseFamily::Impulse | NoiseFamily::Composite)
    }

    fn uses_poisson(&self) -> bool {
        matches!(self.family, NoiseFamily::Poisson | NoiseFamily::Composite)
    }

    fn uses_gaussian(&self) -> bool {
        matches!(self.family, NoiseFamily::Gaussian | NoiseFamily::Composite)
    }
}

// Stage indices keep the per-frame substreams disjoint.
const STREAMS_PER_FRAME: u64 = 4;
const STAGE_IMPULSE: u64 = 0;
const STAGE_POISSON: u64 = 1;
const STAGE_GAUSSIAN: u64 = 2;

fn stage_rng(seed: u64, frame: usize, stage: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 * STREAMS_PER_FRAME + stage + 1);
    rng
}

/// Corrupts one frame. `sigma` is the absolute Gaussian level (already
/// scaled by the clean frame's std); returns the pre-clip, pre-median image
/// too so statistical oracles can see the raw noise.
fn corrupt_frame(
    frame: &ScalarField,
    spec: &NoiseSpec,
    seed: u64,
    frame_idx: usize,
) -> Result<ScalarField> {
    let mut data = frame.as_slice().to_vec();

    if spec.uses_impulse() && spec.impulse_p > 0.0 {
        let mut rng = stage_rng(seed, frame_idx, STAGE_IMPULSE);
        for v in data.iter_mut() {
            if rng.random::<f64>() < spec.impulse_p {
                *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }

    if spec.uses_poisson() {
        let mut rng = stage_rng(seed, frame_idx, STAGE_POISSON);
        let lambda = spec.poisson_lambda;
        for v in data.iter_mut() {
            let mean = *v * lambda;
            *v = if mean > 0.0 {
                let pois = Poisson::new(mean)
                    .map_err(|e| Error::numeric(format!("Poisson({mean}): {e}")))?;
                pois.sample(&mut rng) / lambda
            } else {
                0.0
            };
        }
    }

    if spec.uses_gaussian() && spec.gaussian_rel > 0.0 {
        // Amplitude is relative to the clean frame's standard deviation.
        let sigma = spec.gaussian_rel * frame.std();
        if sigma > 0.0 {
            let mut rng = stage_rng(seed, frame_idx, STAGE_GAUSSIAN);
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::numeric(format!("Normal(0,{sigma}): {e}")))?;
            for v in data.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    let (h, w) = frame.shape();
    let mut out = frame.like(Array2::from_shape_vec((h, w), data).expect("same size"))?;
    if spec.post_median {
        out = median3(&out);
    }
    let (lo, hi) = spec.clip;
    out.like(out.data().mapv(|v| v.clamp(lo, hi)))
}

/// Applies the recipe to every frame with independent (seed, frame)
/// substreams; the clip runs last in all cases.
pub fn corrupt(stack: &FrameStack, spec: &NoiseSpec, seed: u64) -> Result<FrameStack> {
    spec.validate()?;
    for f in stack.frames() {
        if f.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("corrupt expects stack values in [0,1]"));
        }
    }
    let corrupted: Result<Vec<ScalarField>> = stack
        .frames()
        .par_iter()
        .enumerate()
        .map(|(idx, f)| corrupt_frame(f, spec, seed, idx))
        .collect();
    let mut out = FrameStack::new(corrupted?, stack.channels(), Some(stack.times().to_vec()))?;
    out.meta = stack.meta.clone();
    out.meta.kind = Some("corrupted".into());
    Ok(out)
}

/// 3x3 median filter with replicate borders.
pub fn median3(field: &ScalarField) -> ScalarField {
    let (h, w) = field.shape();
    let d = field.data();
    let mut out = Array2::zeros((h, w));
    let mut window = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    window[k] = d[(yy, xx)];
                    k += 1;
                }
            }
            window.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
            out[(y, x)] = window[4];
        }
    }
    field.like(out).expect("same shape, finite")
}
