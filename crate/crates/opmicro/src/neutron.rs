//! Radiography pipeline: transmission normalization against open-beam and
//! dark-current references, attenuation changes per cycling half-cycle under
//! a cylindrical chord-length thickness model, active-area quantification,
//! and depth profiles.

use crate::fieldstore::{FrameStack, ScalarField};
use crate::noisegen::median3;
use crate::otsu::otsu_threshold;
use crate::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;

/// Instrument pixel-to-distance calibration (pixels per cm).
pub const PX_PER_CM: f64 = 1289.8;

/// Per-cross-section active fraction a row must reach to fall inside the
/// active window.
pub const WINDOW_FRACTION: f64 = 0.20;

/// Histogram bins for the active/inactive threshold.
const OTSU_BINS: usize = 256;

/// Raw radiograph set: intensity frames plus frame-averaged open-beam and
/// dark-current references, with the cylindrical-cell geometry calibration.
///
/// The beam references must exceed the dark current everywhere once both are
/// median-filtered; that is checked where they are consumed, in
/// [`normalize_transmission`].
#[derive(Debug, Clone)]
pub struct RadiographSet {
    intensity: FrameStack,
    open_beam: ScalarField,
    dark_current: ScalarField,
    px_per_cm: f64,
    cell_radius_cm: f64,
    cell_center_px: (f64, f64),
}

impl RadiographSet {
    pub fn new(
        intensity: FrameStack,
        open_beam: ScalarField,
        dark_current: ScalarField,
        px_per_cm: f64,
        cell_radius_cm: f64,
        cell_center_px: (f64, f64),
    ) -> Result<Self> {
        let shape = intensity.frame_shape();
        if open_beam.shape() != shape || dark_current.shape() != shape {
            return Err(Error::invalid(
                "open beam and dark current must match the intensity frame shape",
            ));
        }
        if !(px_per_cm > 0.0) || !px_per_cm.is_finite() {
            return Err(Error::invalid("px_per_cm must be positive"));
        }
        if !(cell_radius_cm > 0.0) || !cell_radius_cm.is_finite() {
            return Err(Error::invalid("cell radius must be positive"));
        }
        if !cell_center_px.0.is_finite() || !cell_center_px.1.is_finite() {
            return Err(Error::invalid("cell center must be finite"));
        }
        Ok(RadiographSet {
            intensity,
            open_beam,
            dark_current,
            px_per_cm,
            cell_radius_cm,
            cell_center_px,
        })
    }

    pub fn intensity(&self) -> &FrameStack {
        &self.intensity
    }

    pub fn open_beam(&self) -> &ScalarField {
        &self.open_beam
    }

    pub fn dark_current(&self) -> &ScalarField {
        &self.dark_current
    }

    pub fn px_per_cm(&self) -> f64 {
        self.px_per_cm
    }

    pub fn cell_radius_cm(&self) -> f64 {
        self.cell_radius_cm
    }

    pub fn cell_center_px(&self) -> (f64, f64) {
        self.cell_center_px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfCycleLabel {
    Charge,
    Discharge,
}

impl HalfCycleLabel {
    fn flipped(self) -> Self {
        match self {
            HalfCycleLabel::Charge => HalfCycleLabel::Discharge,
            HalfCycleLabel::Discharge => HalfCycleLabel::Charge,
        }
    }
}

/// Number of half-cycles in a cycling protocol split.
pub const N_HALF_CYCLES: usize = 8;

/// Partition of a frame stack into eight contiguous half-cycles with
/// alternating charge/discharge labels.
#[derive(Debug, Clone)]
pub struct HalfCycleSplit {
    /// Nine fenceposts: `boundaries[i]..boundaries[i+1]` is half-cycle `i`.
    boundaries: Vec<usize>,
    labels: Vec<HalfCycleLabel>,
}

impl HalfCycleSplit {
    /// Builds the split from fenceposts, labeling segments alternately
    /// starting with `first`.
    pub fn new(boundaries: Vec<usize>, first: HalfCycleLabel) -> Result<Self> {
        let mut labels = Vec::with_capacity(N_HALF_CYCLES);
        let mut l = first;
        for _ in 0..N_HALF_CYCLES {
            labels.push(l);
            l = l.flipped();
        }
        HalfCycleSplit::from_parts(boundaries, labels)
    }

    /// Builds the split from explicit fenceposts and labels.
    pub fn from_parts(boundaries: Vec<usize>, labels: Vec<HalfCycleLabel>) -> Result<Self> {
        if boundaries.len() != N_HALF_CYCLES + 1 {
            return Err(Error::invalid(format!(
                "need {} fenceposts for {} half-cycles, got {}",
                N_HALF_CYCLES + 1,
                N_HALF_CYCLES,
                boundaries.len()
            )));
        }
        if boundaries[0] != 0 {
            return Err(Error::invalid("half-cycles must start at frame 0"));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("half-cycle boundaries must be strictly increasing"));
        }
        if labels.len() != N_HALF_CYCLES {
            return Err(Error::invalid(format!(
                "need {} labels, got {}",
                N_HALF_CYCLES,
                labels.len()
            )));
        }
        if labels.windows(2).any(|w| w[1] != w[0].flipped()) {
            return Err(Error::invalid("half-cycle labels must alternate"));
        }
        Ok(HalfCycleSplit { boundaries, labels })
    }

    /// Total frames covered by the split.
    pub fn n_frames(&self) -> usize {
        *self.boundaries.last().expect("nine fenceposts")
    }

    /// Frame range of half-cycle `i`.
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }

    pub fn label(&self, i: usize) -> HalfCycleLabel {
        self.labels[i]
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Index of the half-cycle containing frame `t`.
    fn segment_of(&self, t: usize) -> usize {
        self.boundaries[1..].partition_point(|&b| b <= t)
    }
}

/// Normalized transmission T = (I - DC)/(OB - DC), with a 3x3 median filter
/// applied to the intensity frames and both references first.
///
/// Errors when the filtered beam span OB - DC is not positive everywhere.
pub fn normalize_transmission(set: &RadiographSet) -> Result<FrameStack> {
    let ob = median3(&set.open_beam);
    let dc = median3(&set.dark_current);
    let span = ob.data() - dc.data();
    if span.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(
            "open beam must exceed dark current everywhere in the crop",
        ));
    }
    let frames: Vec<ScalarField> = set
        .intensity
        .frames()
        .par_iter()
        .map(|f| {
            let i = median3(f);
            ScalarField::new((i.data() - dc.data()) / &span)
        })
        .collect::<Result<_>>()?;
    FrameStack::new(
        frames,
        set.intensity.channels(),
        Some(set.intensity.times().to_vec()),
    )
}

/// Beam-path thickness through the cylindrical cell at image column `x_px`:
/// 2·sqrt(r² − d²) with d the in-plane distance from the cell axis in cm.
///
/// Even in d and maximal on the axis; errors when the column lies outside
/// the cell projection (d > r).
pub fn chord_thickness(set: &RadiographSet, x_px: usize) -> Result<f64> {
    let d = (x_px as f64 - set.cell_center_px.0).abs() / set.px_per_cm;
    let r = set.cell_radius_cm;
    if d > r {
        return Err(Error::invalid(format!(
            "column {x_px} lies {d:.4} cm from the cell axis, outside radius {r:.4}"
        )));
    }
    Ok(2.0 * (r * r - d * d).max(0.0).sqrt())
}

/// Chord thickness for every column of a `width`-column crop.
pub fn thickness_profile(set: &RadiographSet, width: usize) -> Result<Vec<f64>> {
    (0..width).map(|x| chord_thickness(set, x)).collect()
}

/// Change in attenuation coefficient per half-cycle,
/// ΔΣ = ln(T(t)/T(t_ref))/δ column-wise, where t_ref is the first frame of
/// the half-cycle containing t. ΔΣ at each t_ref is exactly zero.
///
/// Requires positive transmission everywhere, a positive per-column
/// thickness, and a split covering the stack exactly.
pub fn delta_attenuation(
    t_stack: &FrameStack,
    split: &HalfCycleSplit,
    thickness: &[f64],
) -> Result<FrameStack> {
    if t_stack.channels() != 1 {
        return Err(Error::invalid("attenuation analysis needs a single-channel stack"));
    }
    let (h, w) = t_stack.frame_shape();
    if thickness.len() != w {
        return Err(Error::invalid(format!(
            "{} thickness entries for {} columns",
            thickness.len(),
            w
        )));
    }
    if thickness.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid("thickness must be positive in every column"));
    }
    if split.n_frames() != t_stack.n_frames() {
        return Err(Error::invalid(format!(
            "split covers {} frames but the stack has {}",
            split.n_frames(),
            t_stack.n_frames()
        )));
    }
    for f in t_stack.frames() {
        if f.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("transmission must be positive everywhere"));
        }
    }
    let frames: Vec<ScalarField> = (0..t_stack.n_frames())
        .into_par_iter()
        .map(|t| {
            let t_ref = split.segment(split.segment_of(t)).start;
            let cur = t_stack.frame(t).data();
            let base = t_stack.frame(t_ref).data();
            let mut out = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    out[(y, x)] = (cur[(y, x)] / base[(y, x)]).ln() / thickness[x];
                }
            }
            ScalarField::new(out)
        })
        .collect::<Result<_>>()?;
    FrameStack::new(frames, 1, Some(t_stack.times().to_vec()))
}

/// Active-area classification of one attenuation-change field.
#[derive(Debug, Clone)]
pub struct ActiveArea {
    /// Active pixels / region pixels (0 when degenerate).
    pub fraction: f64,
    /// 1.0 on active pixels, 0.0 elsewhere (all zero when degenerate).
    pub active_mask: ScalarField,
    /// Outermost rows whose in-region active fraction reaches
    /// [`WINDOW_FRACTION`], inclusive; `None` when no row qualifies.
    pub window: Option<(usize, usize)>,
    /// Histogram threshold on |ΔΣ|; `None` when degenerate.
    pub threshold: Option<f64>,
    /// True when the region is constant-valued (no threshold exists).
    pub degenerate: bool,
}

/// Classifies electrode pixels as active by Otsu-thresholding |ΔΣ| inside
/// the region (nonzero entries of `region`). A constant-valued region has no
/// threshold and is flagged instead of erroring.
pub fn active_fraction(delta: &ScalarField, region: &ScalarField) -> Result<ActiveArea> {
    let (h, w) = delta.shape();
    if region.shape() != (h, w) {
        return Err(Error::invalid("region mask must match the field shape"));
    }
    let d = delta.data();
    let m = region.data();
    let mut vals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m[(y, x)] != 0.0 {
                vals.push(d[(y, x)].abs());
            }
        }
    }
    if vals.is_empty() {
        return Err(Error::invalid("electrode region is empty"));
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if vals.len() < 2 || !(hi > lo) {
        return Ok(ActiveArea {
            fraction: 0.0,
            active_mask: ScalarField::constant(h, w, 0.0)?,
            window: None,
            threshold: None,
            degenerate: true,
        });
    }
    let threshold = otsu_threshold(&vals, OTSU_BINS)?;

    let mut mask = Array2::zeros((h, w));
    let mut active = 0usize;
    let mut window: Option<(usize, usize)> = None;
    for y in 0..h {
        let mut row_region = 0usize;
        let mut row_active = 0usize;
        for x in 0..w {
            if m[(y, x)] != 0.0 {
                row_region += 1;
                if d[(y, x)].abs() > threshold {
                    row_active += 1;
                    mask[(y, x)] = 1.0;
                }
            }
        }
        active += row_active;
        if row_region > 0 && row_active as f64 >= WINDOW_FRACTION * row_region as f64 {
            window = Some(match window {
                None => (y, y),
                Some((y_lo, _)) => (y_lo, y),
            });
        }
    }
    Ok(ActiveArea {
        fraction: active as f64 / vals.len() as f64,
        active_mask: ScalarField::new(mask)?,
        window,
        threshold: Some(threshold),
        degenerate: false,
    })
}

/// Active-area classification at the final frame of every half-cycle.
pub fn half_cycle_active_fractions(
    delta: &FrameStack,
    split: &HalfCycleSplit,
    region: &ScalarField,
) -> Result<Vec<ActiveArea>> {
    if split.n_frames() != delta.n_frames() {
        return Err(Error::invalid(format!(
            "split covers {} frames but the stack has {}",
            split.n_frames(),
            delta.n_frames()
        )));
    }
    (0..N_HALF_CYCLES)
        .map(|i| active_fraction(delta.frame(split.segment(i).end - 1), region))
        .collect()
}

/// Which image axis runs along the electrode depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthAxis {
    /// Depth along rows; statistics taken across each row.
    Y,
    /// Depth along columns; statistics taken across each column.
    X,
}

/// Per-depth-position mean and population standard deviation (ddof 0) across
/// the in-plane axis.
pub fn depth_profile(delta: &ScalarField, axis: DepthAxis) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = delta.shape();
    let d = delta.data();
    let (depth, lateral) = match axis {
        DepthAxis::Y => (h, w),
        DepthAxis::X => (w, h),
    };
    let mut mean = Vec::with_capacity(depth);
    let mut std = Vec::with_capacity(depth);
    for i in 0..depth {
        let at = |j: usize| match axis {
            DepthAxis::Y => d[(i, j)],
            DepthAxis::X => d[(j, i)],
        };
        let m = (0..lateral).map(at).sum::<f64>() / lateral as f64;
        let var = (0..lateral).map(|j| (at(j) - m) * (at(j) - m)).sum::<f64>() / lateral as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    (mean, std)
}

/// Mean over all voxels of the population standard deviation of the 3x3x3
/// spatiotemporal neighborhood (clamped at stack borders). A smoothing
/// filter never increases it.
pub fn local_variability(stack: &FrameStack) -> Result<f64> {
    if stack.channels() != 1 {
        return Err(Error::invalid("variability metric needs a single-channel stack"));
    }
    let (h, w) = stack.frame_shape();
    let n_t = stack.n_frames();
    let total: f64 = (0..n_t)
        .into_par_iter()
        .map(|t| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut vals = [0.0f64; 27];
                    let mut k = 0;
                    for dt in -1i64..=1 {
                        let tt = (t as i64 + dt).clamp(0, n_t as i64 - 1) as usize;
                        let d = stack.frame(tt).data();
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                vals[k] = d[(yy, xx)];
                                k += 1;
                            }
                        }
                    }
                    let m = vals.iter().sum::<f64>() / 27.0;
                    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 27.0;
                    acc += var.sqrt();
                }
            }
            acc
        })
        .sum();
    Ok(total / (n_t * h * w) as f64)
}
