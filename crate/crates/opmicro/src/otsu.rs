//! Otsu's histogram threshold, shared by the spectro-microscopy and
//! radiography pipelines.

use crate::{Error, Result};

/// Threshold maximizing between-class variance on a `bins`-bin histogram
/// spanning the data range. Ties resolve to the middle of the maximal
/// plateau, so two well-separated levels split halfway between them.
///
/// Errors on degenerate inputs: fewer than two samples, zero range, or any
/// non-finite value.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::numeric("Otsu needs at least two samples"));
    }
    if bins < 2 {
        return Err(Error::invalid("Otsu needs at least two bins"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::numeric("Otsu input contains non-finite values"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::numeric("Otsu input has zero variance"));
    }

    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        hist[idx] += 1;
    }

    let total = values.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| (i as f64 + 0.5) * n as f64)
        .sum::<f64>()
        / total;

    // Scan all cuts; class 0 holds bins 0..=t.
    let mut best = f64::NEG_INFINITY;
    let mut plateau: Vec<usize> = Vec::new();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..bins - 1 {
        w0 += hist[t] as f64;
        sum0 += (t as f64 + 0.5) * hist[t] as f64;
        if w0 == 0.0 || w0 == total {
            continue;
        }
        let w1 = total - w0;
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if plateau.is_empty() || between > best + best.abs() * 1e-12 {
            best = between;
            plateau.clear();
            plateau.push(t);
        } else if (between - best).abs() <= best.abs() * 1e-12 {
            plateau.push(t);
        }
    }
    if plateau.is_empty() {
        return Err(Error::numeric("Otsu found no admissible split"));
    }
    let t = plateau[plateau.len() / 2];
    Ok(lo + (t + 1) as f64 * width)
}
