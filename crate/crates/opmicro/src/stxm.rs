//! Spectro-microscopy composition pipeline: shift registration, optical
//! density, two-energy and non-negative least-squares unmixing, and
//! bootstrap uncertainty over energy resamples.

use crate::fft::Fft2;
use crate::fieldstore::ScalarField;
use crate::otsu::otsu_threshold;
use crate::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Reference absorption changes at the two working energies (706, 713 eV):
/// rows are energies, columns are the lithiated and delithiated end members.
pub const TWO_ENERGY_LFP: [f64; 2] = [0.64, 0.11];
pub const TWO_ENERGY_FP: [f64; 2] = [0.05, 0.60];
pub const TWO_ENERGY_EV: [f64; 2] = [706.0, 713.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralKind {
    Intensity,
    Absorbance,
    OpticalDensity,
}

/// One image per energy, energies strictly increasing, images co-shaped.
#[derive(Debug, Clone)]
pub struct SpectralStack {
    energies: Vec<f64>,
    images: Vec<ScalarField>,
    pub kind: SpectralKind,
}

impl SpectralStack {
    pub fn new(energies: Vec<f64>, images: Vec<ScalarField>, kind: SpectralKind) -> Result<Self> {
        if energies.is_empty() || energies.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} energies for {} images",
                energies.len(),
                images.len()
            )));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("energies must be finite"));
        }
        for w in energies.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("energies must be strictly increasing"));
            }
        }
        let shape = images[0].shape();
        if images.iter().any(|f| f.shape() != shape) {
            return Err(Error::invalid("spectral images must share one shape"));
        }
        Ok(SpectralStack {
            energies,
            images,
            kind,
        })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn images(&self) -> &[ScalarField] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &ScalarField {
        &self.images[i]
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.images[0].shape()
    }
}

/// End-member reference spectra on a shared energy grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSpectra {
    energies: Vec<f64>,
    lfp: Vec<f64>,
    fp: Vec<f64>,
}

impl ReferenceSpectra {
    pub fn new(energies: Vec<f64>, lfp: Vec<f64>, fp: Vec<f64>) -> Result<Self> {
        if energies.len() != lfp.len() || energies.len() != fp.len() {
            return Err(Error::invalid("reference vectors must share one length"));
        }
        if energies.is_empty() {
            return Err(Error::invalid("reference spectra are empty"));
        }
        for w in energies.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("reference energies must be strictly increasing"));
            }
        }
        if energies
            .iter()
            .chain(lfp.iter())
            .chain(fp.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("reference spectra must be finite"));
        }
        Ok(ReferenceSpectra { energies, lfp, fp })
    }

    /// The published two-point references at 706 and 713 eV.
    pub fn two_energy() -> Self {
        ReferenceSpectra {
            energies: TWO_ENERGY_EV.to_vec(),
            lfp: TWO_ENERGY_LFP.to_vec(),
            fp: TWO_ENERGY_FP.to_vec(),
        }
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn lfp(&self) -> &[f64] {
        &self.lfp
    }

    pub fn fp(&self) -> &[f64] {
        &self.fp
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let record = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
        w.write_record(["energy", "lfp", "fp"]).map_err(record)?;
        for i in 0..self.len() {
            w.write_record([
                self.energies[i].to_string(),
                self.lfp[i].to_string(),
                self.fp[i].to_string(),
            ])
            .map_err(record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let (mut energies, mut lfp, mut fp) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            if rec.len() != 3 {
                return Err(Error::invalid("reference CSV needs columns energy,lfp,fp"));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: bad number '{s}'", path.display())))
            };
            energies.push(parse(&rec[0])?);
            lfp.push(parse(&rec[1])?);
            fp.push(parse(&rec[2])?);
        }
        ReferenceSpectra::new(energies, lfp, fp)
    }
}

/// Integer-pixel shift (dy, dx) of `moving` relative to `reference`,
/// located by the peak of the phase cross-correlation. Applying the negated
/// shift to `moving` aligns it with `reference`.
pub fn register_translation(reference: &ScalarField, moving: &ScalarField) -> Result<(isize, isize)> {
    if reference.shape() != moving.shape() {
        return Err(Error::invalid("registration inputs must share one shape"));
    }
    let (h, w) = reference.shape();
    let n = h * w;
    let rel = |f: &ScalarField| f.std() / (1.0 + f.mean().abs());
    if rel(reference) <= 1e-12 || rel(moving) <= 1e-12 {
        return Err(Error::numeric("cannot register a constant image"));
    }

    let mut fft = Fft2::new(h, w);
    let mut fr: Vec<Complex64> = reference
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let mut fm: Vec<Complex64> = moving
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft.forward(&mut fr);
    fft.forward(&mut fm);
    // Unit-magnitude cross-power spectrum, oriented so the correlation
    // peak lands at +shift; zero-power bins contribute nothing.
    for i in 0..n {
        let c = fr[i].conj() * fm[i];
        let mag = c.norm();
        fr[i] = if mag > 1e-300 { c / mag } else { Complex64::default() };
    }
    fft.inverse(&mut fr);

    let mut best = f64::NEG_INFINITY;
    let mut peak = 0usize;
    for (i, v) in fr.iter().enumerate() {
        if v.re > best {
            best = v.re;
            peak = i;
        }
    }
    let (py, px) = (peak / w, peak % w);
    let dy = if py > h / 2 { py as isize - h as isize } else { py as isize };
    let dx = if px > w / 2 { px as isize - w as isize } else { px as isize };
    Ok((dy, dx))
}

/// Circularly shifts a field by (dy, dx): output(y, x) = input(y - dy, x - dx).
pub fn apply_shift(field: &ScalarField, shift: (isize, isize)) -> ScalarField {
    let (h, w) = field.shape();
    let (dy, dx) = shift;
    let src = field.as_slice();
    let mut out = vec![0.0; h * w];
    let m = |v: isize, n: usize| -> usize {
        let n = n as isize;
        (((v % n) + n) % n) as usize
    };
    for y in 0..h {
        let sy = m(y as isize - dy, h);
        for x in 0..w {
            let sx = m(x as isize - dx, w);
            out[y * w + x] = src[sy * w + sx];
        }
    }
    field
        .like(ndarray::Array2::from_shape_vec((h, w), out).expect("same size"))
        .expect("finite data")
}

/// Registers every image to the first and returns the aligned stack with the
/// detected per-image shifts.
pub fn register_stack(stack: &SpectralStack) -> Result<(SpectralStack, Vec<(isize, isize)>)> {
    let mut shifts = Vec::with_capacity(stack.len());
    let mut images = Vec::with_capacity(stack.len());
    let reference = stack.image(0);
    for i in 0..stack.len() {
        let s = if i == 0 {
            (0, 0)
        } else {
            register_translation(reference, stack.image(i))?
        };
        shifts.push(s);
        images.push(apply_shift(stack.image(i), (-s.0, -s.1)));
    }
    let aligned = SpectralStack::new(stack.energies.clone(), images, stack.kind)?;
    Ok((aligned, shifts))
}

/// Optical density from an intensity stack: per energy, the incident
/// intensity I0 is the mean of the brighter (background) Otsu class and
/// OD = |ln(I/I0)|. The magnitude convention is recorded in the stack kind;
/// a zero-variance image is all background, giving OD = 0.
pub fn optical_density(stack: &SpectralStack) -> Result<SpectralStack> {
    if stack.kind != SpectralKind::Intensity {
        return Err(Error::invalid("optical density needs an intensity stack"));
    }
    let mut images = Vec::with_capacity(stack.len());
    for img in stack.images() {
        if img.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("intensities must be positive"));
        }
        let i0 = match otsu_threshold(img.as_slice(), 256) {
            Ok(t) => {
                let bg: Vec<f64> = img.as_slice().iter().copied().filter(|&v| v > t).collect();
                if bg.is_empty() {
                    return Err(Error::numeric("empty background class"));
                }
                bg.iter().sum::<f64>() / bg.len() as f64
            }
            // Constant image: every pixel is background.
            Err(_) => img.mean(),
        };
        let od = img.data().mapv(|v| (v / i0).ln().abs());
        images.push(img.like(od)?);
    }
    SpectralStack::new(stack.energies.clone(), images, SpectralKind::OpticalDensity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreEdgeMode {
    Divide,
    Subtract,
}

/// Normalizes a stack to the pre-edge level: the scalar mean of the image
/// nearest `pre_edge_ev` divides (or is subtracted from) every image.
pub fn pre_edge_normalize(
    stack: &SpectralStack,
    pre_edge_ev: f64,
    mode: PreEdgeMode,
) -> Result<SpectralStack> {
    let i_pre = nearest_index(&stack.energies, pre_edge_ev);
    let level = stack.image(i_pre).mean();
    let images: Vec<ScalarField> = match mode {
        PreEdgeMode::Divide => {
            if level.abs() < 1e-12 {
                return Err(Error::numeric("pre-edge level is zero; cannot divide"));
            }
            stack
                .images()
                .iter()
                .map(|f| f.like(f.data().mapv(|v| v / level)))
                .collect::<Result<_>>()?
        }
        PreEdgeMode::Subtract => stack
            .images()
            .iter()
            .map(|f| f.like(f.data().mapv(|v| v - level)))
            .collect::<Result<_>>()?,
    };
    SpectralStack::new(stack.energies.clone(), images, stack.kind)
}

fn nearest_index(energies: &[f64], target: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &e) in energies.iter().enumerate() {
        let d = (e - target).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

/// Lithium-fraction map with an explicit validity mask (1 = valid). Invalid
/// pixels hold X = 0 rather than a sentinel, so no NaN propagates.
#[derive(Debug, Clone)]
pub struct CompositionMap {
    pub x: ScalarField,
    pub valid: ScalarField,
    pub n_invalid: usize,
}

/// Per-pixel exact solve of the 2x2 system
/// [dS706; dS713] = [[LFP706, FP706], [LFP713, FP713]] [a; b],
/// X = a / (a + b) clipped to [0,1]; pixels with a + b <= 0 are flagged.
pub fn composition_two_energy(
    s706: &ScalarField,
    s713: &ScalarField,
    refs: &ReferenceSpectra,
) -> Result<CompositionMap> {
    if s706.shape() != s713.shape() {
        return Err(Error::invalid("energy maps must share one shape"));
    }
    if refs.len() != 2 {
        return Err(Error::invalid("two-energy solve needs exactly two reference rows"));
    }
    let (l0, l1) = (refs.lfp[0], refs.lfp[1]);
    let (f0, f1) = (refs.fp[0], refs.fp[1]);
    let det = l0 * f1 - f0 * l1;
    if det.abs() < 1e-12 {
        return Err(Error::numeric(format!(
            "reference matrix is singular (det = {det:.3e})"
        )));
    }
    let (h, w) = s706.shape();
    let mut x = vec![0.0; h * w];
    let mut valid = vec![0.0; h * w];
    let mut n_invalid = 0usize;
    for i in 0..h * w {
        let (s0, s1) = (s706.as_slice()[i], s713.as_slice()[i]);
        let a = (s0 * f1 - f0 * s1) / det;
        let b = (l0 * s1 - s0 * l1) / det;
        if a + b > 0.0 {
            x[i] = (a / (a + b)).clamp(0.0, 1.0);
            valid[i] = 1.0;
        } else {
            n_invalid += 1;
        }
    }
    Ok(CompositionMap {
        x: ScalarField::from_vec(h, w, x)?,
        valid: ScalarField::from_vec(h, w, valid)?,
        n_invalid,
    })
}

/// Non-negative least squares by the active-set method of Lawson and Hanson.
/// `a` is row-major `rows x cols`; returns the minimizer of |a z - y| with
/// z >= 0.
pub fn nnls(rows: usize, cols: usize, a: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if a.len() != rows * cols || y.len() != rows {
        return Err(Error::invalid("nnls dimensions do not match"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("nnls needs a nonempty system"));
    }
    let am = nalgebra::DMatrix::from_row_slice(rows, cols, a);
    let yv = nalgebra::DVector::from_column_slice(y);

    let mut passive = vec![false; cols];
    let mut z = vec![0.0; cols];
    let tol = 1e-12 * am.amax().max(1.0) * yv.amax().max(1.0);

    for _ in 0..(3 * cols.max(8)) {
        // Gradient of the active (zero) variables; most positive enters.
        let resid = &yv - &am * nalgebra::DVector::from_column_slice(&z);
        let grad = am.transpose() * resid;
        let mut enter = None;
        let mut best = tol;
        for j in 0..cols {
            if !passive[j] && grad[j] > best {
                best = grad[j];
                enter = Some(j);
            }
        }
        let Some(enter) = enter else { break };
        passive[enter] = true;

        // Inner loop: solve on the passive set, clip variables that go
        // non-positive back onto the boundary.
        loop {
            let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
            let sub = am.select_columns(idx.iter());
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(&yv, 1e-14)
                .map_err(Error::numeric)?;
            if sol.iter().all(|&v| v > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    z[j] = sol[k];
                }
                break;
            }
            // Step from z toward sol until the first passive variable hits 0.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if sol[k] <= 0.0 {
                    let step = z[j] / (z[j] - sol[k]);
                    alpha = alpha.min(step);
                }
            }
            if !alpha.is_finite() {
                return Err(Error::numeric("nnls inner loop failed to make progress"));
            }
            for (k, &j) in idx.iter().enumerate() {
                z[j] += alpha * (sol[k] - z[j]);
                if z[j] <= tol.max(1e-300) {
                    z[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    Ok(z)
}

/// Exact two-variable NNLS from the Gram matrix `g` and projection `c`:
/// enumerates the unconstrained solution and both single-variable boundary
/// solutions, returning the feasible candidate with least objective.
fn nnls2_gram(g: [[f64; 2]; 2], c: [f64; 2]) -> (f64, f64) {
    let obj = |a: f64, b: f64| {
        0.5 * (g[0][0] * a * a + 2.0 * g[0][1] * a * b + g[1][1] * b * b) - a * c[0] - b * c[1]
    };
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let mut best = (0.0, 0.0);
    let mut best_obj = 0.0;
    if det.abs() > 1e-300 {
        let a = (c[0] * g[1][1] - g[0][1] * c[1]) / det;
        let b = (g[0][0] * c[1] - c[0] * g[1][0]) / det;
        if a >= 0.0 && b >= 0.0 {
            return (a, b);
        }
    }
    if g[0][0] > 0.0 {
        let a = (c[0] / g[0][0]).max(0.0);
        let o = obj(a, 0.0);
        if o < best_obj {
            best_obj = o;
            best = (a, 0.0);
        }
    }
    if g[1][1] > 0.0 {
        let b = (c[1] / g[1][1]).max(0.0);
        let o = obj(0.0, b);
        if o < best_obj {
            best = (0.0, b);
        }
    }
    best
}

/// Per-pixel NNLS unmixing over all stack energies; the references must be
/// given on exactly the stack's energy grid. X = a/(a+b) clipped, with
/// a = b = 0 pixels flagged invalid.
pub fn composition_nnls(stack: &SpectralStack, refs: &ReferenceSpectra) -> Result<CompositionMap> {
    if stack.len() < 2 {
        return Err(Error::invalid("nnls unmixing needs at least two energies"));
    }
    if refs.len() != stack.len()
        || refs
            .energies
            .iter()
            .zip(&stack.energies)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::invalid("references must cover the stack energies"));
    }
    let weights = vec![1.0; stack.len()];
    composition_nnls_weighted(stack, refs, &weights)
}

/// NNLS unmixing with per-energy multiplicities (the bootstrap path). The
/// closed-form two-variable solve on the weighted Gram matrix is exact.
fn composition_nnls_weighted(
    stack: &SpectralStack,
    refs: &ReferenceSpectra,
    weights: &[f64],
) -> Result<CompositionMap> {
    let (h, w) = stack.shape();
    let n_px = h * w;
    let ne = stack.len();

    let mut g = [[0.0f64; 2]; 2];
    for e in 0..ne {
        let (l, f, wt) = (refs.lfp[e], refs.fp[e], weights[e]);
        g[0][0] += wt * l * l;
        g[0][1] += wt * l * f;
        g[1][1] += wt * f * f;
    }
    g[1][0] = g[0][1];

    let images: Vec<&[f64]> = stack.images().iter().map(|f| f.as_slice()).collect();
    let results: Vec<(f64, f64, bool)> = (0..n_px)
        .into_par_iter()
        .map(|i| {
            let mut c = [0.0f64; 2];
            for e in 0..ne {
                let s = images[e][i];
                c[0] += weights[e] * refs.lfp[e] * s;
                c[1] += weights[e] * refs.fp[e] * s;
            }
            let (a, b) = nnls2_gram(g, c);
            if a + b > 0.0 {
                ((a / (a + b)).clamp(0.0, 1.0), 1.0, false)
            } else {
                (0.0, 0.0, true)
            }
        })
        .collect();

    let mut x = Vec::with_capacity(n_px);
    let mut valid = Vec::with_capacity(n_px);
    let mut n_invalid = 0usize;
    for (xv, vv, inv) in results {
        x.push(xv);
        valid.push(vv);
        n_invalid += inv as usize;
    }
    Ok(CompositionMap {
        x: ScalarField::from_vec(h, w, x)?,
        valid: ScalarField::from_vec(h, w, valid)?,
        n_invalid,
    })
}

/// Energy-sampling strategy for the bootstrap: the pool of candidate
/// energies that replicates draw from with replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// `n` energies linearly spaced across the stack's full range.
    Even { n: usize },
    /// One pre-edge energy plus `k` per absorption-edge window
    /// (705-707 eV and 711-714 eV).
    EdgeFocused { k: usize },
}

/// Pre-edge anchor and edge windows for the edge-focused pool (eV).
const PRE_EDGE_EV: f64 = 703.0;
const EDGE_WINDOWS: [(f64, f64); 2] = [(705.0, 707.0), (711.0, 714.0)];

fn strategy_pool(energies: &[f64], strategy: SamplingStrategy) -> Result<Vec<usize>> {
    let targets: Vec<f64> = match strategy {
        SamplingStrategy::Even { n } => {
            if n < 2 {
                return Err(Error::invalid("even strategy needs n >= 2"));
            }
            let (lo, hi) = (energies[0], energies[energies.len() - 1]);
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        }
        SamplingStrategy::EdgeFocused { k } => {
            if k < 1 {
                return Err(Error::invalid("edge-focused strategy needs k >= 1"));
            }
            let mut t = vec![PRE_EDGE_EV];
            for (lo, hi) in EDGE_WINDOWS {
                for i in 0..k {
                    let f = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
                    t.push(lo + (hi - lo) * f);
                }
            }
            t
        }
    };
    let mut pool: Vec<usize> = targets.iter().map(|&t| nearest_index(energies, t)).collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() < targets.len() {
        return Err(Error::invalid(format!(
            "stack energies too coarse for the strategy: {} targets collapse to {} distinct energies",
            targets.len(),
            pool.len()
        )));
    }
    Ok(pool)
}

/// Per-pixel bootstrap uncertainty of X: each replicate draws as many
/// energies as the stack holds, with replacement from the strategy pool,
/// and refits X; sigma is the per-pixel standard deviation over replicates.
/// The resample count stays at the full measurement size regardless of pool
/// size, so the estimate probes pool coverage, not sample count.
#[derive(Debug, Clone)]
pub struct SigmaXResult {
    pub sigma: ScalarField,
    /// 1 where every replicate produced a valid X.
    pub valid: ScalarField,
    /// Mean sigma over valid pixels.
    pub mean_sigma: f64,
    pub n_boot: usize,
}

pub fn bootstrap_sigma_x(
    stack: &SpectralStack,
    refs: &ReferenceSpectra,
    n_boot: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<SigmaXResult> {
    if n_boot < 2 {
        return Err(Error::invalid("bootstrap needs n_boot >= 2"));
    }
    if stack.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least two energies"));
    }
    if refs.len() != stack.len() {
        return Err(Error::invalid("references must cover the stack energies"));
    }
    let pool = strategy_pool(&stack.energies, strategy)?;
    let ne = stack.len();
    let (h, w) = stack.shape();
    let n_px = h * w;

    let replicates: Result<Vec<CompositionMap>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut weights = vec![0.0; ne];
            for _ in 0..ne {
                weights[pool[rng.random_range(0..pool.len())]] += 1.0;
            }
            composition_nnls_weighted(stack, refs, &weights)
        })
        .collect();
    let replicates = replicates?;

    let mut sigma = vec![0.0; n_px];
    let mut valid = vec![1.0; n_px];
    let mut sum_sigma = 0.0;
    let mut n_valid = 0usize;
    for i in 0..n_px {
        let all_valid = replicates.iter().all(|m| m.valid.as_slice()[i] == 1.0);
        if !all_valid {
            valid[i] = 0.0;
            continue;
        }
        let mean = replicates.iter().map(|m| m.x.as_slice()[i]).sum::<f64>() / n_boot as f64;
        let var = replicates
            .iter()
            .map(|m| {
                let d = m.x.as_slice()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / n_boot as f64;
        sigma[i] = var.sqrt();
        sum_sigma += sigma[i];
        n_valid += 1;
    }
    if n_valid == 0 {
        return Err(Error::numeric("no pixel produced a valid X in every replicate"));
    }
    Ok(SigmaXResult {
        sigma: ScalarField::from_vec(h, w, sigma)?,
        valid: ScalarField::from_vec(h, w, valid)?,
        mean_sigma: sum_sigma / n_valid as f64,
        n_boot,
    })
}

/// The canonical 65-point energy grid, 695-715 eV.
pub fn default_energy_grid() -> Vec<f64> {
    (0..65).map(|i| 695.0 + 20.0 * i as f64 / 64.0).collect()
}

/// Sigmoidal absorption-edge gate shared by the synthetic spectra.
fn edge_gate(e: f64) -> f64 {
    1.0 / (1.0 + (-(e - 704.0) / 0.8).exp())
}

/// Unit-height Gaussian peak at `center` with width `sigma` (eV).
fn peak(e: f64, center: f64, sigma: f64) -> f64 {
    (-(e - center) * (e - center) / (2.0 * sigma * sigma)).exp()
}

/// Nominal peak width of the synthetic end members (eV).
const PEAK_SIGMA: f64 = 1.3;

/// Smooth synthetic end-member spectra on `energies`: two sigmoid-gated
/// Gaussian peaks (706 and 713 eV) mixed per end member so each curve passes
/// exactly through its published two-point references.
pub fn synthetic_reference_spectra(energies: &[f64]) -> Result<ReferenceSpectra> {
    let phi = |e: f64| -> (f64, f64) {
        let gate = edge_gate(e);
        (gate * peak(e, 706.0, PEAK_SIGMA), gate * peak(e, 713.0, PEAK_SIGMA))
    };
    // Solve the 2x2 mixing so that s(706) and s(713) hit the anchors.
    let (p11, p12) = phi(TWO_ENERGY_EV[0]);
    let (p21, p22) = phi(TWO_ENERGY_EV[1]);
    let det = p11 * p22 - p12 * p21;
    let solve = |s0: f64, s1: f64| -> (f64, f64) {
        ((s0 * p22 - p12 * s1) / det, (p11 * s1 - s0 * p21) / det)
    };
    let (la, lb) = solve(TWO_ENERGY_LFP[0], TWO_ENERGY_LFP[1]);
    let (fa, fb) = solve(TWO_ENERGY_FP[0], TWO_ENERGY_FP[1]);

    let mut lfp = Vec::with_capacity(energies.len());
    let mut fp = Vec::with_capacity(energies.len());
    for &e in energies {
        let (a, b) = phi(e);
        lfp.push(la * a + lb * b);
        fp.push(fa * a + fb * b);
    }
    ReferenceSpectra::new(energies.to_vec(), lfp, fp)
}

/// Amplitude of the line-shape systematic added to noisy synthetic stacks.
const MISMATCH_AMP: f64 = 0.07;

/// Synthetic absorbance stack for a composition map: per pixel
/// dS_e = a lfp_e + b fp_e with a = x * total, b = (1 - x) * total. With
/// `lambda` set, two measurement imperfections are layered on: Poisson
/// counting noise at `lambda` expected counts per unit absorbance
/// (substream = energy index), and a deterministic line-shape error
/// (slightly widened peaks) that puts the stack outside the reference span.
/// Measured stacks never sit exactly in that span; without such structure
/// the bootstrap bands would reflect fit leverage rather than energy
/// coverage. One shoulder sits beside each main line with near-balanced
/// weight at the two anchor energies, keeping the composition estimate
/// close to unbiased.
pub fn synthetic_absorbance_stack(
    refs: &ReferenceSpectra,
    x_map: &ScalarField,
    total_map: &ScalarField,
    lambda: Option<f64>,
    seed: u64,
) -> Result<SpectralStack> {
    if x_map.shape() != total_map.shape() {
        return Err(Error::invalid("x and total maps must share one shape"));
    }
    if x_map.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("x map must lie in [0,1]"));
    }
    if total_map.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("total map must be non-negative"));
    }
    if let Some(l) = lambda {
        if !(l > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
    }
    let (h, w) = x_map.shape();
    // Unresolved multiplet shoulders beside each main line: narrow features
    // the two-reference model cannot represent, placed inside the edge
    // region so any energy-sampling scheme that covers the edge sees them.
    let mismatch: Vec<f64> = refs
        .energies
        .iter()
        .map(|&e| {
            MISMATCH_AMP * edge_gate(e) * (peak(e, 705.6, 0.5) + peak(e, 712.5, 0.5))
        })
        .collect();
    let images: Result<Vec<ScalarField>> = (0..refs.len())
        .into_par_iter()
        .map(|e| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(e as u64 + 1);
            let mut data = Vec::with_capacity(h * w);
            for i in 0..h * w {
                let a = x_map.as_slice()[i] * total_map.as_slice()[i];
                let b = (1.0 - x_map.as_slice()[i]) * total_map.as_slice()[i];
                let clean = a * refs.lfp[e] + b * refs.fp[e];
                let v = match lambda {
                    Some(l) => {
                        let mean = (clean + total_map.as_slice()[i] * mismatch[e]) * l;
                        if mean > 0.0 {
                            let pois = Poisson::new(mean)
                                .map_err(|e| Error::numeric(format!("poisson: {e}")))?;
                            pois.sample(&mut rng) / l
                        } else {
                            0.0
                        }
                    }
                    None => clean,
                };
                data.push(v);
            }
            ScalarField::from_vec(h, w, data)
        })
        .collect();
    SpectralStack::new(refs.energies.clone(), images?, SpectralKind::Absorbance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field(h: usize, w: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        ScalarField::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn registration_identity_and_known_shift() {
        let f = ramp_field(32, 24, 3);
        assert_eq!(register_translation(&f, &f).unwrap(), (0, 0));
        let moved = apply_shift(&f, (3, -2));
        assert_eq!(register_translation(&f, &moved).unwrap(), (3, -2));
        let back = apply_shift(&moved, (-3, 2));
        assert_eq!(back, f);
    }

    #[test]
    fn registration_exact_over_shift_fuzz() {
        let f = ramp_field(64, 64, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..60 {
            let dy = rng.random_range(-31i64..=32) as isize;
            let dx = rng.random_range(-31i64..=32) as isize;
            let moved = apply_shift(&f, (dy, dx));
            assert_eq!(register_translation(&f, &moved).unwrap(), (dy, dx));
        }
    }

    #[test]
    fn registration_rejects_constant_images() {
        let f = ScalarField::constant(16, 16, 0.7).unwrap();
        let g = ramp_field(16, 16, 4);
        assert!(register_translation(&f, &g).is_err());
        assert!(register_translation(&g, &f).is_err());
    }

    #[test]
    fn optical_density_levels() {
        // Background 1.0, particle at 1/e: OD = 1 in the particle, 0 outside.
        let mut data = vec![1.0; 400];
        for y in 5..15 {
            for x in 5..15 {
                data[y * 20 + x] = (-1.0f64).exp();
            }
        }
        let img = ScalarField::from_vec(20, 20, data).unwrap();
        let stack =
            SpectralStack::new(vec![706.0], vec![img], SpectralKind::Intensity).unwrap();
        let od = optical_density(&stack).unwrap();
        assert_eq!(od.kind, SpectralKind::OpticalDensity);
        let o = od.image(0).as_slice();
        assert!((o[7 * 20 + 7] - 1.0).abs() < 1e-12);
        assert!(o[0].abs() < 1e-12);

        // Constant intensity: I = I0 everywhere, OD = 0.
        let flat = ScalarField::constant(8, 8, 0.4).unwrap();
        let stack =
            SpectralStack::new(vec![706.0], vec![flat], SpectralKind::Intensity).unwrap();
        let od = optical_density(&stack).unwrap();
        assert!(od.image(0).as_slice().iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn otsu_background_matches_brute_force_on_two_level_image() {
        let mut data = vec![1.0; 256];
        for i in 0..80 {
            data[i] = 0.5;
        }
        // Brute-force inter-class variance over candidate cuts.
        let t_ref = {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for cut in 1..=999 {
                let t = 0.4 + 0.7 * cut as f64 / 1000.0;
                let (lo, hi): (Vec<f64>, Vec<f64>) = data.iter().partition(|&&v| v <= t);
                if lo.is_empty() || hi.is_empty() {
                    continue;
                }
                let (w0, w1) = (lo.len() as f64, hi.len() as f64);
                let (m0, m1) = (
                    lo.iter().sum::<f64>() / w0,
                    hi.iter().sum::<f64>() / w1,
                );
                let v = w0 * w1 * (m0 - m1) * (m0 - m1);
                if v > best.0 {
                    best = (v, t);
                }
            }
            best.1
        };
        let t = otsu_threshold(&data, 256).unwrap();
        assert!(t > 0.5 && t < 1.0, "otsu threshold {t}");
        assert!(t_ref > 0.5 && t_ref < 1.0);
        let img = ScalarField::from_vec(16, 16, data).unwrap();
        let stack =
            SpectralStack::new(vec![706.0], vec![img], SpectralKind::Intensity).unwrap();
        let od = optical_density(&stack).unwrap();
        // I0 = 1.0, so background OD is 0 and particle OD is ln 2.
        let o = od.image(0).as_slice();
        assert!((o[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!(o[255].abs() < 1e-12);
    }

    #[test]
    fn two_energy_reference_columns_and_midpoint() {
        let refs = ReferenceSpectra::two_energy();
        let s706 = ScalarField::from_vec(1, 3, vec![0.64, 0.05, 0.345]).unwrap();
        let s713 = ScalarField::from_vec(1, 3, vec![0.11, 0.60, 0.355]).unwrap();
        let map = composition_two_energy(&s706, &s713, &refs).unwrap();
        let x = map.x.as_slice();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
        assert!((x[2] - 0.5).abs() < 1e-12);
        assert_eq!(map.n_invalid, 0);
        assert!(map.valid.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_energy_flags_nonpositive_mass() {
        let refs = ReferenceSpectra::two_energy();
        let s706 = ScalarField::from_vec(1, 2, vec![0.0, -0.64]).unwrap();
        let s713 = ScalarField::from_vec(1, 2, vec![0.0, -0.11]).unwrap();
        let map = composition_two_energy(&s706, &s713, &refs).unwrap();
        assert_eq!(map.n_invalid, 2);
        assert!(map.x.as_slice().iter().all(|&v| v == 0.0));

        let bad = ReferenceSpectra::new(
            vec![706.0, 713.0],
            vec![0.3, 0.3],
            vec![0.3, 0.3],
        )
        .unwrap();
        assert!(composition_two_energy(&s706, &s713, &bad).is_err());
    }

    #[test]
    fn nnls_matches_reference_columns_and_mixtures() {
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        // Pure LFP pixel, pure FP pixel, and a 0.3 mixture.
        let x_map = ScalarField::from_vec(1, 3, vec![1.0, 0.0, 0.3]).unwrap();
        let total = ScalarField::constant(1, 3, 1.0).unwrap();
        let stack = synthetic_absorbance_stack(&refs, &x_map, &total, None, 0).unwrap();
        let map = composition_nnls(&stack, &refs).unwrap();
        let x = map.x.as_slice();
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!(x[1].abs() < 1e-10);
        assert!((x[2] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn nnls_clamps_negative_leaning_fits() {
        // dS = LFP - 0.2 FP: unconstrained least squares wants b < 0.
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let n = grid.len();
        let mut a = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for e in 0..n {
            a.push(refs.lfp()[e]);
            a.push(refs.fp()[e]);
            y.push(refs.lfp()[e] - 0.2 * refs.fp()[e]);
        }
        let z = nnls(n, 2, &a, &y).unwrap();
        assert_eq!(z[1], 0.0);
        assert!(z[0] > 0.0);
    }

    #[test]
    fn nnls_agrees_with_grid_oracle_on_random_pixels() {
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let n = grid.len();
        let mut a_flat = Vec::with_capacity(2 * n);
        for e in 0..n {
            a_flat.push(refs.lfp()[e]);
            a_flat.push(refs.fp()[e]);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..100 {
            let (ta, tb) = (rng.random::<f64>() * 1.5, rng.random::<f64>() * 1.5);
            let y: Vec<f64> = (0..n)
                .map(|e| {
                    ta * refs.lfp()[e] - tb * refs.fp()[e]
                        + 0.02 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            let z = nnls(n, 2, &a_flat, &y).unwrap();

            // Coarse-to-fine grid search over (a, b) >= 0.
            let sse = |a: f64, b: f64| -> f64 {
                (0..n)
                    .map(|e| {
                        let r = y[e] - a * refs.lfp()[e] - b * refs.fp()[e];
                        r * r
                    })
                    .sum()
            };
            let (mut ca, mut cb, mut half) = (1.5, 1.5, 1.5);
            for _ in 0..40 {
                let mut best = (f64::INFINITY, ca, cb);
                for i in -4i32..=4 {
                    for j in -4i32..=4 {
                        let a = (ca + half * i as f64 / 4.0).max(0.0);
                        let b = (cb + half * j as f64 / 4.0).max(0.0);
                        let v = sse(a, b);
                        if v < best.0 {
                            best = (v, a, b);
                        }
                    }
                }
                ca = best.1;
                cb = best.2;
                half *= 0.6;
            }
            assert!(
                (z[0] - ca).abs() < 1e-6 && (z[1] - cb).abs() < 1e-6,
                "nnls ({}, {}) vs grid ({ca}, {cb})",
                z[0],
                z[1]
            );
        }
    }

    #[test]
    fn nnls2_gram_matches_lawson_hanson() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = 8;
            let mut a_flat = Vec::with_capacity(2 * n);
            let mut y = Vec::with_capacity(n);
            let mut g = [[0.0; 2]; 2];
            let mut c = [0.0; 2];
            let mut rows = Vec::new();
            for _ in 0..n {
                let r = [rng.random::<f64>(), rng.random::<f64>()];
                let yv = 2.0 * (rng.random::<f64>() - 0.5);
                a_flat.extend_from_slice(&r);
                y.push(yv);
                rows.push((r, yv));
            }
            for (r, yv) in &rows {
                g[0][0] += r[0] * r[0];
                g[0][1] += r[0] * r[1];
                g[1][1] += r[1] * r[1];
                c[0] += r[0] * yv;
                c[1] += r[1] * yv;
            }
            g[1][0] = g[0][1];
            let (fa, fb) = nnls2_gram(g, c);
            let z = nnls(n, 2, &a_flat, &y).unwrap();
            assert!(
                (fa - z[0]).abs() < 1e-9 && (fb - z[1]).abs() < 1e-9,
                "gram ({fa}, {fb}) vs active set ({}, {})",
                z[0],
                z[1]
            );
        }
    }

    #[test]
    fn two_energy_equals_nnls_when_unconstrained_is_feasible() {
        let refs = ReferenceSpectra::two_energy();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..200 {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let s0 = a * refs.lfp()[0] + b * refs.fp()[0];
            let s1 = a * refs.lfp()[1] + b * refs.fp()[1];
            let m706 = ScalarField::from_vec(1, 1, vec![s0]).unwrap();
            let m713 = ScalarField::from_vec(1, 1, vec![s1]).unwrap();
            let direct = composition_two_energy(&m706, &m713, &refs).unwrap();
            let stack = SpectralStack::new(
                vec![706.0, 713.0],
                vec![m706, m713],
                SpectralKind::Absorbance,
            )
            .unwrap();
            let via_nnls = composition_nnls(&stack, &refs).unwrap();
            assert!(
                (direct.x.as_slice()[0] - via_nnls.x.as_slice()[0]).abs() < 1e-12,
                "two-energy {} vs nnls {}",
                direct.x.as_slice()[0],
                via_nnls.x.as_slice()[0]
            );
        }
    }

    #[test]
    fn synthetic_spectra_hit_published_anchors() {
        // A grid containing 706.0 and 713.0 exactly.
        let grid: Vec<f64> = (0..41).map(|i| 695.0 + 0.5 * i as f64).collect();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let i706 = grid.iter().position(|&e| e == 706.0).unwrap();
        let i713 = grid.iter().position(|&e| e == 713.0).unwrap();
        assert!((refs.lfp()[i706] - 0.64).abs() < 1e-12);
        assert!((refs.lfp()[i713] - 0.11).abs() < 1e-12);
        assert!((refs.fp()[i706] - 0.05).abs() < 1e-12);
        assert!((refs.fp()[i713] - 0.60).abs() < 1e-12);
        // Pre-edge is dark and values stay non-negative.
        assert!(refs.lfp()[0].abs() < 1e-3);
        assert!(refs.lfp().iter().chain(refs.fp().iter()).all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_noise_bootstrap_sigma_is_zero() {
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let x_map = ScalarField::from_vec(2, 2, vec![0.2, 0.5, 0.8, 1.0]).unwrap();
        let total = ScalarField::constant(2, 2, 1.0).unwrap();
        let stack = synthetic_absorbance_stack(&refs, &x_map, &total, None, 0).unwrap();
        let out = bootstrap_sigma_x(&stack, &refs, 16, SamplingStrategy::Even { n: 65 }, 7)
            .unwrap();
        assert!(out.mean_sigma < 1e-10, "mean sigma {}", out.mean_sigma);
    }

    #[test]
    fn bootstrap_sigma_converges_between_pool_sizes() {
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let x_map = ScalarField::constant(8, 8, 0.5).unwrap();
        let total = ScalarField::constant(8, 8, 1.0).unwrap();
        let stack = synthetic_absorbance_stack(&refs, &x_map, &total, Some(2000.0), 3).unwrap();
        let sigma = |strategy| {
            bootstrap_sigma_x(&stack, &refs, 1500, strategy, 11).unwrap().mean_sigma
        };
        // Even-strategy series: the band estimate is converged by 20 energies.
        let s20 = sigma(SamplingStrategy::Even { n: 20 });
        let s65 = sigma(SamplingStrategy::Even { n: 65 });
        let rel = (s20 - s65).abs() / s65;
        assert!(rel < 0.05, "sigma {s20:.4e} vs {s65:.4e}: rel change {rel:.3}");

        // Edge-focused series: converged at k = 5 but not yet at k = 3
        // (k = 7 is the densest collision-free pool on this grid).
        let e3 = sigma(SamplingStrategy::EdgeFocused { k: 3 });
        let e5 = sigma(SamplingStrategy::EdgeFocused { k: 5 });
        let e7 = sigma(SamplingStrategy::EdgeFocused { k: 7 });
        let rel5 = (e5 - e7).abs() / e7;
        let rel3 = (e3 - e7).abs() / e7;
        assert!(rel5 < 0.10, "edge sigma k=5 {e5:.4e} vs k=7 {e7:.4e}: rel {rel5:.3}");
        assert!(rel3 > 0.10, "edge series should not be converged at k=3: rel {rel3:.3}");
    }

    #[test]
    fn strategy_pools_validate_coverage() {
        let grid = default_energy_grid();
        let pool = strategy_pool(&grid, SamplingStrategy::Even { n: 20 }).unwrap();
        assert_eq!(pool.len(), 20);
        let pool = strategy_pool(&grid, SamplingStrategy::EdgeFocused { k: 5 }).unwrap();
        assert_eq!(pool.len(), 11);
        // Coarse grid: 3 energies cannot host 11 distinct edge samples.
        let coarse = vec![695.0, 706.0, 713.0];
        assert!(strategy_pool(&coarse, SamplingStrategy::EdgeFocused { k: 5 }).is_err());
        assert!(strategy_pool(&grid, SamplingStrategy::Even { n: 1 }).is_err());
    }

    #[test]
    fn reference_csv_round_trip() {
        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.csv");
        refs.write_csv(&path).unwrap();
        let back = ReferenceSpectra::read_csv(&path).unwrap();
        assert_eq!(refs.energies(), back.energies());
        assert_eq!(refs.lfp(), back.lfp());
        assert_eq!(refs.fp(), back.fp());
    }

    #[test]
    fn register_stack_aligns_shifted_energies() {
        let base = ramp_field(24, 24, 30);
        let imgs = vec![
            base.clone(),
            apply_shift(&base, (2, -1)),
            apply_shift(&base, (-3, 4)),
        ];
        let stack = SpectralStack::new(vec![1.0, 2.0, 3.0], imgs, SpectralKind::Absorbance)
            .unwrap();
        let (aligned, shifts) = register_stack(&stack).unwrap();
        assert_eq!(shifts, vec![(0, 0), (2, -1), (-3, 4)]);
        for img in aligned.images() {
            assert_eq!(img, &base);
        }
    }

    #[test]
    fn stack_and_reference_validation() {
        let f = ScalarField::constant(4, 4, 0.1).unwrap();
        assert!(SpectralStack::new(vec![2.0, 1.0], vec![f.clone(), f.clone()],
            SpectralKind::Intensity).is_err());
        assert!(SpectralStack::new(vec![1.0], vec![], SpectralKind::Intensity).is_err());
        let g = ScalarField::constant(3, 3, 0.1).unwrap();
        assert!(SpectralStack::new(vec![1.0, 2.0], vec![f.clone(), g],
            SpectralKind::Intensity).is_err());
        assert!(ReferenceSpectra::new(vec![1.0, 2.0], vec![0.1], vec![0.2, 0.3]).is_err());

        // optical_density preconditions.
        let neg = ScalarField::constant(4, 4, -1.0).unwrap();
        let stack = SpectralStack::new(vec![1.0], vec![neg], SpectralKind::Intensity).unwrap();
        assert!(optical_density(&stack).is_err());
        let abs_stack = SpectralStack::new(vec![1.0], vec![f], SpectralKind::Absorbance).unwrap();
        assert!(optical_density(&abs_stack).is_err());
    }

    #[test]
    fn pre_edge_normalization_modes() {
        let grid = vec![703.0, 706.0, 713.0];
        let imgs = vec![
            ScalarField::constant(2, 2, 0.5).unwrap(),
            ScalarField::constant(2, 2, 1.0).unwrap(),
            ScalarField::constant(2, 2, 2.0).unwrap(),
        ];
        let stack = SpectralStack::new(grid, imgs, SpectralKind::OpticalDensity).unwrap();
        let div = pre_edge_normalize(&stack, 703.0, PreEdgeMode::Divide).unwrap();
        assert!((div.image(1).mean() - 2.0).abs() < 1e-12);
        assert!((div.image(2).mean() - 4.0).abs() < 1e-12);
        let sub = pre_edge_normalize(&stack, 703.0, PreEdgeMode::Subtract).unwrap();
        assert!((sub.image(1).mean() - 0.5).abs() < 1e-12);
        assert!((sub.image(0).mean()).abs() < 1e-12);
    }

    #[test]
    fn sigma_x_stable_under_mild_denoising() {
        use crate::denoise::{denoise_stack, DenoiserSpec};
        use crate::fieldstore::FrameStack;

        let grid = default_energy_grid();
        let refs = synthetic_reference_spectra(&grid).unwrap();
        let x_map = ScalarField::constant(8, 8, 0.5).unwrap();
        let total = ScalarField::constant(8, 8, 1.0).unwrap();
        let stack = synthetic_absorbance_stack(&refs, &x_map, &total, Some(2000.0), 5).unwrap();

        let frames = FrameStack::single_channel(stack.images().to_vec(), None).unwrap();
        let smooth = denoise_stack(&frames, &DenoiserSpec::gaussian_blur(), 0).unwrap();
        let den_stack = SpectralStack::new(
            stack.energies().to_vec(),
            smooth.frames().to_vec(),
            SpectralKind::Absorbance,
        )
        .unwrap();

        let raw = bootstrap_sigma_x(&stack, &refs, 800, SamplingStrategy::Even { n: 65 }, 23)
            .unwrap()
            .mean_sigma;
        let den = bootstrap_sigma_x(&den_stack, &refs, 800, SamplingStrategy::Even { n: 65 }, 23)
            .unwrap()
            .mean_sigma;
        let rel = (raw - den).abs() / raw;
        assert!(rel < 0.25, "raw {raw:.4e} vs denoised {den:.4e}: rel {rel:.3}");
    }
}
