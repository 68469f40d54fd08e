//! Color-video analysis: LAB conversion, seeded k-means color clustering,
//! particle segmentation with sub-pixel perimeters, staged-phase
//! classification heuristics, state-of-charge estimation, and particle
//! population statistics.

use crate::fieldstore::{FrameStack, ScalarField};
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Characteristic concentrations of the three staged phases.
pub const C_BLUE: f64 = 0.26;
pub const C_RED: f64 = 0.55;
pub const C_GOLD: f64 = 1.0;

/// Per-pixel phase label. The derived ordering (blue < red < gold among
/// phases) is the physical staging order used by the irreversibility rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Phase {
    Background = 0,
    Blue = 1,
    Red = 2,
    Gold = 3,
}

impl Phase {
    pub fn concentration(self) -> Option<f64> {
        match self {
            Phase::Background => None,
            Phase::Blue => Some(C_BLUE),
            Phase::Red => Some(C_RED),
            Phase::Gold => Some(C_GOLD),
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Phase::Background,
            1 => Phase::Blue,
            2 => Phase::Red,
            3 => Phase::Gold,
            _ => return Err(Error::invalid(format!("phase label {v} out of range"))),
        })
    }
}

/// Image stack in CIE-LAB coordinates, one (H, W, 3) array per frame.
#[derive(Debug, Clone)]
pub struct LabStack {
    frames: Vec<Array3<f64>>,
    times: Vec<f64>,
}

impl LabStack {
    pub fn new(frames: Vec<Array3<f64>>, times: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("LabStack must contain at least one frame"));
        }
        if times.len() != frames.len() {
            return Err(Error::invalid("one timestamp per LAB frame"));
        }
        let dim = frames[0].dim();
        if dim.2 != 3 || dim.0 == 0 || dim.1 == 0 {
            return Err(Error::invalid("LAB frames must be H x W x 3"));
        }
        for f in &frames {
            if f.dim() != dim {
                return Err(Error::invalid("LAB frames must share one shape"));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("LAB values must be finite"));
            }
            for lab in f.rows() {
                if !(0.0..=100.0).contains(&lab[0]) {
                    return Err(Error::invalid("L must lie in [0, 100]"));
                }
            }
        }
        Ok(LabStack { frames, times })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.frames[0].dim();
        (d.0, d.1)
    }

    pub fn frame(&self, t: usize) -> &Array3<f64> {
        &self.frames[t]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn lab(&self, t: usize, y: usize, x: usize) -> [f64; 3] {
        let f = &self.frames[t];
        [f[(y, x, 0)], f[(y, x, 1)], f[(y, x, 2)]]
    }
}

/// sRGB ([0,1] components) to CIE-LAB under the D65 white point.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    fn linearize(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let (r, g, b) = (linearize(rgb[0]), linearize(rgb[1]), linearize(rgb[2]));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
    fn f(t: f64) -> f64 {
        const D3: f64 = 216.0 / 24389.0; // (6/29)^3
        if t > D3 {
            t.cbrt()
        } else {
            t * (841.0 / 108.0) + 4.0 / 29.0
        }
    }
    let (fx, fy, fz) = (f(x / WHITE[0]), f(y / WHITE[1]), f(z / WHITE[2]));
    // Clamp the few-ppm overshoot of the matrix row sums so L stays in range.
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a 3-channel sRGB stack (components in [0,1]) to LAB.
pub fn rgb_to_lab(stack: &FrameStack) -> Result<LabStack> {
    if stack.channels() != 3 {
        return Err(Error::invalid(format!(
            "LAB conversion needs 3 channels, got {}",
            stack.channels()
        )));
    }
    let (h, w) = stack.frame_shape();
    let mut frames = Vec::with_capacity(stack.n_frames());
    for t in 0..stack.n_frames() {
        let (r, g, b) = (
            stack.frame_channel(t, 0).data(),
            stack.frame_channel(t, 1).data(),
            stack.frame_channel(t, 2).data(),
        );
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let rgb = [r[(y, x)], g[(y, x)], b[(y, x)]];
                if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::invalid("sRGB components must lie in [0, 1]"));
                }
                let lab = srgb_pixel_to_lab(rgb);
                for c in 0..3 {
                    out[(y, x, c)] = lab[c];
                }
            }
        }
        frames.push(out);
    }
    LabStack::new(frames, stack.times().to_vec())
}

/// Seeded k-means color clustering over all pixels of the stack.
#[derive(Debug, Clone)]
pub struct ColorClusters {
    pub centers: Vec<[f64; 3]>,
    /// Per-frame cluster id of every pixel.
    pub labels: Vec<Array2<u8>>,
    pub iterations: usize,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

/// K-means++ seeding followed by Lloyd iterations until the largest center
/// shift drops below 1e-6 or 300 iterations pass. Empty clusters are
/// reseeded to the point farthest from its assigned center. Deterministic
/// for a fixed seed, and cluster ids are canonical: centers are reordered
/// lexicographically by (L, a, b) after convergence, so the id of a color
/// cluster depends on the data rather than on the seeding order.
pub fn kmeans_lab(stack: &LabStack, k: usize, seed: u64) -> Result<ColorClusters> {
    let (h, w) = stack.shape();
    let n = stack.n_frames() * h * w;
    if k == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if k > 255 {
        return Err(Error::invalid("cluster count must fit in a byte"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} pixels cannot form {k} clusters")));
    }
    let mut pts = Vec::with_capacity(n);
    for t in 0..stack.n_frames() {
        for y in 0..h {
            for x in 0..w {
                pts.push(stack.lab(t, y, x));
            }
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 3]> = vec![pts[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[idx]);
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..300 {
        iterations += 1;
        for (i, p) in pts.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(p, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pts.iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..3 {
                sums[c][j] += p[j];
            }
        }
        let mut new_centers = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..3 {
                    new_centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            } else {
                // Reseed to the point farthest from its assigned center.
                let far = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .map(|(i, p)| (i, dist2(p, &centers[assign[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("points outnumber clusters");
                taken.push(far);
                new_centers[c] = pts[far];
            }
        }
        let shift = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centers = new_centers;
        if shift < 1e-6 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| centers[i].partial_cmp(&centers[j]).expect("finite centers"));
    let centers: Vec<[f64; 3]> = order.iter().map(|&i| centers[i]).collect();
    for (i, p) in pts.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (c, center) in centers.iter().enumerate() {
            let d = dist2(p, center);
            if d < best.0 {
                best = (d, c);
            }
        }
        assign[i] = best.1;
    }

    let mut labels = Vec::with_capacity(stack.n_frames());
    let mut it = assign.iter();
    for _ in 0..stack.n_frames() {
        let mut frame = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                frame[(y, x)] = *it.next().expect("one label per pixel") as u8;
            }
        }
        labels.push(frame);
    }
    Ok(ColorClusters {
        centers,
        labels,
        iterations,
    })
}

/// Maps cluster ids to phases; `phase_of[id]` assigns cluster `id`.
pub fn apply_cluster_phases(labels: &[Array2<u8>], phase_of: &[Phase]) -> Result<Vec<Array2<Phase>>> {
    labels
        .iter()
        .map(|frame| {
            let mut out = Array2::from_elem(frame.dim(), Phase::Background);
            for (o, &id) in out.iter_mut().zip(frame.iter()) {
                *o = *phase_of
                    .get(id as usize)
                    .ok_or_else(|| Error::invalid(format!("cluster id {id} has no phase")))?;
            }
            Ok(out)
        })
        .collect()
}

/// One segmented particle.
#[derive(Debug, Clone)]
pub struct Particle {
    pub id: usize,
    pub pixels: Vec<(usize, usize)>,
    pub area_px: usize,
    pub perimeter_px: f64,
    /// Characteristic size V/A = area / perimeter, in length units.
    pub char_size: f64,
    /// Mean concentration per frame; NaN where no pixel carries a phase.
    pub conc_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParticleTable {
    pub particles: Vec<Particle>,
    /// Particle id per pixel (0 = none).
    pub label_map: Array2<usize>,
    pub pixel_size: f64,
}

/// Sub-pixel contour length of a binary mask: marching squares with linear
/// interpolation on a binomially smoothed copy, which removes the staircase
/// bias of raw pixel boundaries. Shapes too thin to reach the smoothed
/// half-level fall back to the un-smoothed contour, so the length is always
/// positive for a non-empty mask.
fn mask_perimeter(mask: &Array2<f64>) -> f64 {
    let smoothed = binomial_blur(mask);
    let p = marching_squares_length(&smoothed, 0.5 - 1e-9);
    if p > 0.0 {
        p
    } else {
        marching_squares_length(mask, 0.5)
    }
}

/// Separable [1/4, 1/2, 1/4] blur with zero boundary.
fn binomial_blur(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.5 * f[(y, x)];
            if x > 0 {
                s += 0.25 * f[(y, x - 1)];
            }
            if x + 1 < w {
                s += 0.25 * f[(y, x + 1)];
            }
            tmp[(y, x)] = s;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.5 * tmp[(y, x)];
            if y > 0 {
                s += 0.25 * tmp[(y - 1, x)];
            }
            if y + 1 < h {
                s += 0.25 * tmp[(y + 1, x)];
            }
            out[(y, x)] = s;
        }
    }
    out
}

/// Total length of the `level` iso-contour by marching squares with linear
/// edge interpolation. The field is zero-padded so contours close.
fn marching_squares_length(f: &Array2<f64>, level: f64) -> f64 {
    let (h, w) = f.dim();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            f[(y as usize, x as usize)]
        }
    };
    let mut total = 0.0;
    for y in -1..h as i64 {
        for x in -1..w as i64 {
            let (tl, tr, bl, br) = (at(y, x), at(y, x + 1), at(y + 1, x), at(y + 1, x + 1));
            let idx = ((tl > level) as usize) << 3
                | ((tr > level) as usize) << 2
                | ((br > level) as usize) << 1
                | ((bl > level) as usize);
            if idx == 0 || idx == 15 {
                continue;
            }
            let cross = |a: f64, b: f64| (level - a) / (b - a);
            let top = (cross(tl, tr), 0.0);
            let right = (1.0, cross(tr, br));
            let bottom = (cross(bl, br), 1.0);
            let left = (0.0, cross(tl, bl));
            let segs: &[((f64, f64), (f64, f64))] = match idx {
                1 => &[(left, bottom)],
                2 => &[(bottom, right)],
                3 => &[(left, right)],
                4 => &[(top, right)],
                6 => &[(top, bottom)],
                7 => &[(left, top)],
                8 => &[(top, left)],
                9 => &[(top, bottom)],
                11 => &[(top, right)],
                12 => &[(left, right)],
                13 => &[(bottom, right)],
                14 => &[(left, bottom)],
                // Saddles: fixed pairing; the length difference between the
                // two resolutions is negligible for perimeter estimation.
                5 => &[(top, right), (left, bottom)],
                10 => &[(top, left), (bottom, right)],
                _ => unreachable!(),
            };
            for &((x1, y1), (x2, y2)) in segs {
                total += ((x2 - x1) * (x2 - x1) + (y2 - y1) * (y2 - y1)).sqrt();
            }
        }
    }
    total
}

/// 8-connected components of non-background pixels; components smaller than
/// `min_area` are dropped. Ids are assigned in raster order of each
/// component's first pixel, starting at 1.
pub fn segment_particles(
    labels: &Array2<u8>,
    background_id: u8,
    min_area: usize,
    pixel_size: f64,
) -> Result<ParticleTable> {
    if !(pixel_size > 0.0) || !pixel_size.is_finite() {
        return Err(Error::invalid("pixel size must be positive"));
    }
    let (h, w) = labels.dim();
    let mut label_map = Array2::zeros((h, w));
    let mut visited = Array2::from_elem((h, w), false);
    let mut particles = Vec::new();
    let mut next_id = 1usize;
    for sy in 0..h {
        for sx in 0..w {
            if visited[(sy, sx)] || labels[(sy, sx)] == background_id {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = vec![(sy, sx)];
            visited[(sy, sx)] = true;
            while let Some((y, x)) = queue.pop() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if !visited[(yy, xx)] && labels[(yy, xx)] != background_id {
                            visited[(yy, xx)] = true;
                            queue.push((yy, xx));
                        }
                    }
                }
            }
            if pixels.len() < min_area {
                continue;
            }
            pixels.sort_unstable();
            let (y_lo, x_lo) = (
                pixels.iter().map(|p| p.0).min().expect("non-empty"),
                pixels.iter().map(|p| p.1).min().expect("non-empty"),
            );
            let (y_hi, x_hi) = (
                pixels.iter().map(|p| p.0).max().expect("non-empty"),
                pixels.iter().map(|p| p.1).max().expect("non-empty"),
            );
            // Two cells of margin so the blur and the contour both close.
            let (bh, bw) = (y_hi - y_lo + 5, x_hi - x_lo + 5);
            let mut mask = Array2::zeros((bh, bw));
            for &(y, x) in &pixels {
                mask[(y - y_lo + 2, x - x_lo + 2)] = 1.0;
            }
            let perimeter = mask_perimeter(&mask);
            let area = pixels.len();
            for &(y, x) in &pixels {
                label_map[(y, x)] = next_id;
            }
            particles.push(Particle {
                id: next_id,
                area_px: area,
                perimeter_px: perimeter,
                char_size: area as f64 / perimeter * pixel_size,
                pixels,
                conc_trace: Vec::new(),
            });
            next_id += 1;
        }
    }
    Ok(ParticleTable {
        particles,
        label_map,
        pixel_size,
    })
}

/// Phase labels per frame after the physical-consistency rules.
#[derive(Debug, Clone)]
pub struct PhaseMap {
    frames: Vec<Array2<Phase>>,
}

impl PhaseMap {
    pub fn new(frames: Vec<Array2<Phase>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("PhaseMap must contain at least one frame"));
        }
        let dim = frames[0].dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(Error::invalid("phase frames must share one shape"));
        }
        Ok(PhaseMap { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    pub fn frame(&self, t: usize) -> &Array2<Phase> {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Array2<Phase>] {
        &self.frames
    }
}

/// Applies the physical-consistency rules to raw per-pixel phase labels, in
/// order: (1) particle pixels are blue throughout the solid-solution range;
/// (2) pixels still blue in the final frame become background in all frames;
/// (3) once a pixel turns red after the solid-solution range, later blues
/// become red; (4) reversals toward an earlier stage are removed by
/// forward-filling the latest stage reached; (5) background is absorbing.
/// Pixels outside the particle mask are background in every frame.
pub fn classify_phases(
    labels: &[Array2<Phase>],
    mask: &ScalarField,
    schedule: std::ops::Range<usize>,
) -> Result<PhaseMap> {
    if labels.is_empty() {
        return Err(Error::invalid("no label frames"));
    }
    let (h, w) = labels[0].dim();
    if labels.iter().any(|f| f.dim() != (h, w)) || mask.shape() != (h, w) {
        return Err(Error::invalid("labels and mask must share one shape"));
    }
    let n = labels.len();
    if schedule.start > schedule.end || schedule.end > n {
        return Err(Error::invalid("solid-solution range must lie inside the stack"));
    }
    let m = mask.data();
    let mut out = vec![Array2::from_elem((h, w), Phase::Background); n];
    for y in 0..h {
        for x in 0..w {
            if m[(y, x)] == 0.0 {
                continue;
            }
            let raw = |t: usize| {
                if schedule.contains(&t) {
                    Phase::Blue
                } else {
                    labels[t][(y, x)]
                }
            };
            if raw(n - 1) == Phase::Blue {
                continue; // never leaves blue: background in all frames
            }
            let mut strongest: Option<Phase> = None;
            let mut red_onset = false;
            let mut absorbed = false;
            for (t, frame) in out.iter_mut().enumerate() {
                let mut l = raw(t);
                if red_onset && l == Phase::Blue {
                    l = Phase::Red;
                }
                if !red_onset && t >= schedule.end && l == Phase::Red {
                    red_onset = true;
                }
                if l != Phase::Background {
                    let s = strongest.map_or(l, |s| s.max(l));
                    strongest = Some(s);
                    l = s;
                }
                if absorbed {
                    l = Phase::Background;
                } else if l == Phase::Background {
                    absorbed = true;
                }
                frame[(y, x)] = l;
            }
        }
    }
    PhaseMap::new(out)
}

/// Image state of charge per frame: concentration-weighted area fractions
/// over the pixels carrying a phase. Errors when a frame has none, so
/// inactive (background-reassigned) area never dilutes the estimate.
pub fn soc_estimate(map: &PhaseMap) -> Result<Vec<f64>> {
    (0..map.n_frames())
        .map(|t| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &p in map.frame(t) {
                if let Some(c) = p.concentration() {
                    sum += c;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::numeric(format!("frame {t} has no particle pixels")));
            }
            Ok(sum / count as f64)
        })
        .collect()
}

/// Fills each particle's mean-concentration trace from a phase map. Frames
/// where none of the particle's pixels carry a phase record NaN.
pub fn concentration_traces(table: &mut ParticleTable, map: &PhaseMap) -> Result<()> {
    if map.shape() != table.label_map.dim() {
        return Err(Error::invalid("phase map and particle table shapes differ"));
    }
    for particle in &mut table.particles {
        let mut trace = Vec::with_capacity(map.n_frames());
        for t in 0..map.n_frames() {
            let frame = map.frame(t);
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(y, x) in &particle.pixels {
                if let Some(c) = frame[(y, x)].concentration() {
                    sum += c;
                    count += 1;
                }
            }
            trace.push(if count > 0 { sum / count as f64 } else { f64::NAN });
        }
        particle.conc_trace = trace;
    }
    Ok(())
}

/// Log-normal fit of particle sizes, reported in both conventions.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LogNormalFit {
    /// Mean of ln(size).
    pub log_mean: f64,
    /// Population standard deviation of ln(size).
    pub log_std: f64,
    /// The distribution's mean in size units, exp(mu + sigma^2 / 2).
    pub mean: f64,
    /// The distribution's standard deviation in size units.
    pub std: f64,
    /// True when all sizes coincide (point mass; log_std = 0).
    pub degenerate: bool,
}

/// Maximum-likelihood log-normal fit (population moments of the log sizes).
pub fn log_normal_fit(sizes: &[f64]) -> Result<LogNormalFit> {
    if sizes.len() < 3 {
        return Err(Error::invalid("log-normal fit needs at least 3 sizes"));
    }
    if sizes.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("sizes must be positive"));
    }
    let logs: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let mu = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / logs.len() as f64;
    let sigma = var.sqrt();
    let mean = (mu + var / 2.0).exp();
    Ok(LogNormalFit {
        log_mean: mu,
        log_std: sigma,
        mean,
        std: mean * (var.exp_m1()).max(0.0).sqrt(),
        degenerate: sigma == 0.0,
    })
}

/// Log-normal fit of the table's characteristic sizes.
pub fn size_distribution(table: &ParticleTable) -> Result<LogNormalFit> {
    let sizes: Vec<f64> = table.particles.iter().map(|p| p.char_size).collect();
    log_normal_fit(&sizes)
}

/// Gaussian-kernel density over (mean concentration, characteristic size).
#[derive(Debug, Clone)]
pub struct DensityGrid {
    /// Cell-center coordinates along the concentration axis.
    pub conc_centers: Vec<f64>,
    /// Cell-center coordinates along the size axis.
    pub size_centers: Vec<f64>,
    /// density[(size index, conc index)].
    pub density: Array2<f64>,
    pub bandwidth: (f64, f64),
}

impl DensityGrid {
    /// Midpoint-rule integral over the grid; close to 1 by construction.
    pub fn integral(&self) -> f64 {
        let dc = self.conc_centers[1] - self.conc_centers[0];
        let ds = self.size_centers[1] - self.size_centers[0];
        self.density.sum() * dc * ds
    }
}

const KDE_GRID: usize = 64;
const KDE_PAD_SIGMAS: f64 = 3.5;

/// 2D kernel density estimate of the particle population at one frame,
/// over (mean concentration, characteristic size). Bandwidths follow
/// Silverman's rule per axis (sigma * n^(-1/6), population sigma) unless
/// one common override is given. Particles without a concentration at the
/// frame are skipped.
pub fn population_density(
    table: &ParticleTable,
    frame: usize,
    bandwidth: Option<f64>,
) -> Result<DensityGrid> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for p in &table.particles {
        let c = *p
            .conc_trace
            .get(frame)
            .ok_or_else(|| Error::invalid(format!("no concentration trace at frame {frame}")))?;
        if c.is_finite() {
            pts.push((c, p.char_size));
        }
    }
    let n = pts.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "population density needs at least 2 particles, got {n}"
        )));
    }
    let axis_stats = |sel: fn(&(f64, f64)) -> f64| {
        let m = pts.iter().map(sel).sum::<f64>() / n as f64;
        let var = pts.iter().map(|p| (sel(p) - m) * (sel(p) - m)).sum::<f64>() / n as f64;
        var.sqrt()
    };
    let (hc, hs) = match bandwidth {
        Some(b) => {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::invalid("bandwidth must be positive"));
            }
            (b, b)
        }
        None => {
            let factor = (n as f64).powf(-1.0 / 6.0);
            let (sc, ss) = (axis_stats(|p| p.0), axis_stats(|p| p.1));
            if sc == 0.0 || ss == 0.0 {
                return Err(Error::numeric(
                    "population collapsed along one axis; supply a bandwidth",
                ));
            }
            (sc * factor, ss * factor)
        }
    };

    let range = |sel: fn(&(f64, f64)) -> f64, h: f64| {
        let lo = pts.iter().map(sel).fold(f64::INFINITY, f64::min) - KDE_PAD_SIGMAS * h;
        let hi = pts.iter().map(sel).fold(f64::NEG_INFINITY, f64::max) + KDE_PAD_SIGMAS * h;
        (lo, hi)
    };
    let (c_lo, c_hi) = range(|p| p.0, hc);
    let (s_lo, s_hi) = range(|p| p.1, hs);
    let centers = |lo: f64, hi: f64| {
        let step = (hi - lo) / KDE_GRID as f64;
        (0..KDE_GRID).map(|i| lo + (i as f64 + 0.5) * step).collect::<Vec<f64>>()
    };
    let conc_centers = centers(c_lo, c_hi);
    let size_centers = centers(s_lo, s_hi);

    let mut density = Array2::zeros((KDE_GRID, KDE_GRID));
    let norm = 1.0 / (n as f64 * 2.0 * std::f64::consts::PI * hc * hs);
    for (is, &s) in size_centers.iter().enumerate() {
        for (ic, &c) in conc_centers.iter().enumerate() {
            let mut acc = 0.0;
            for &(pc, ps) in &pts {
                let zc = (c - pc) / hc;
                let zs = (s - ps) / hs;
                acc += (-0.5 * (zc * zc + zs * zs)).exp();
            }
            density[(is, ic)] = acc * norm;
        }
    }
    Ok(DensityGrid {
        conc_centers,
        size_centers,
        density,
        bandwidth: (hc, hs),
    })
}
