//! Shifted orthonormal Legendre basis and the material-model parameterization.
//!
//! The basis is `P~_n(c) = sqrt(2n+1) * P_n(2c - 1)`, orthonormal under the
//! L2 inner product on [0,1]. A [`MaterialModel`] expands the homogeneous
//! chemical potential mu_h (optionally on top of the ideal-solution term
//! `ln(c/(1-c))`) and the log-diffusivity, so D(c) is positive by
//! construction.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Evaluates `P~_0 .. P~_n` at `c` by the three-term recurrence.
///
/// Returned values are the orthonormal shifted polynomials; index `k` holds
/// `P~_k(c)`.
pub fn legendre_basis(n_max: usize, c: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!("basis argument c={c} outside [0,1]")));
    }
    let x = 2.0 * c - 1.0;
    let mut raw = Vec::with_capacity(n_max + 1);
    raw.push(1.0);
    if n_max >= 1 {
        raw.push(x);
    }
    for n in 1..n_max {
        let next = ((2 * n + 1) as f64 * x * raw[n] - n as f64 * raw[n - 1]) / (n + 1) as f64;
        raw.push(next);
    }
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(n, p)| ((2 * n + 1) as f64).sqrt() * p)
        .collect())
}

/// Evaluates the single basis element `P~_n(c)`.
pub fn legendre_eval(n: usize, c: f64) -> Result<f64> {
    Ok(legendre_basis(n, c)?[n])
}

/// Legendre parameterization of (mu_h, ln D).
///
/// `a` are the chemical-potential coefficients, `b` the log-diffusivity
/// coefficients, both of length `degree + 1`. With `physical_prior` set,
/// mu_h carries the ideal-solution term explicitly and the series models the
/// excess part only. `include_constant` controls whether the n=0 coefficients
/// participate; when false they are held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    pub degree: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub physical_prior: bool,
    pub include_constant: bool,
}

impl MaterialModel {
    pub fn new(
        degree: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        physical_prior: bool,
        include_constant: bool,
    ) -> Result<Self> {
        if a.len() != degree + 1 || b.len() != degree + 1 {
            return Err(Error::invalid(format!(
                "coefficient vectors must have length degree+1 = {}",
                degree + 1
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("material-model coefficients must be finite"));
        }
        if !include_constant && (a[0] != 0.0 || b[0] != 0.0) {
            return Err(Error::invalid(
                "constant coefficients must be zero when include_constant is off",
            ));
        }
        Ok(MaterialModel {
            degree,
            a,
            b,
            physical_prior,
            include_constant,
        })
    }

    /// All-zero model: ideal solution mu_h (when the prior is on) and D = 1.
    pub fn zeros(degree: usize, physical_prior: bool) -> Self {
        MaterialModel {
            degree,
            a: vec![0.0; degree + 1],
            b: vec![0.0; degree + 1],
            physical_prior,
            include_constant: true,
        }
    }

    /// mu_h(c): the Legendre series plus, with the prior, `ln(c/(1-c))`.
    pub fn model_mu(&self, c: f64) -> Result<f64> {
        if self.physical_prior && !(c > 0.0 && c < 1.0) {
            return Err(Error::invalid(format!(
                "mu_h with physical prior needs c in (0,1), got {c}"
            )));
        }
        let basis = legendre_basis(self.degree, c)?;
        let mut mu: f64 = self
            .a
            .iter()
            .zip(&basis)
            .skip(self.series_start())
            .map(|(a, p)| a * p)
            .sum();
        if self.physical_prior {
            mu += (c / (1.0 - c)).ln();
        }
        Ok(mu)
    }

    /// D(c) = exp(sum b_n P~_n(c)); positive for all finite coefficients.
    pub fn model_d(&self, c: f64) -> Result<f64> {
        let basis = legendre_basis(self.degree, c)?;
        let expo: f64 = self
            .b
            .iter()
            .zip(&basis)
            .skip(self.series_start())
            .map(|(b, p)| b * p)
            .sum();
        if expo > 50.0 {
            return Err(Error::numeric(format!(
                "log-diffusivity exponent {expo:.2} exceeds the overflow guard at c={c}"
            )));
        }
        Ok(expo.exp())
    }

    fn series_start(&self) -> usize {
        if self.include_constant {
            0
        } else {
            1
        }
    }

    /// Number of free coefficients under the current flags (a and b together).
    pub fn n_params(&self) -> usize {
        2 * (self.degree + 1 - self.series_start())
    }

    /// Free coefficients as a flat vector: active `a` entries then active `b`.
    pub fn pack(&self) -> Vec<f64> {
        let s = self.series_start();
        self.a[s..].iter().chain(self.b[s..].iter()).copied().collect()
    }

    /// Inverse of [`pack`](Self::pack); keeps flags, replaces coefficients.
    pub fn unpack(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "expected {} packed parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let s = self.series_start();
        let per = self.degree + 1 - s;
        let mut a = vec![0.0; self.degree + 1];
        let mut b = vec![0.0; self.degree + 1];
        a[s..].copy_from_slice(&theta[..per]);
        b[s..].copy_from_slice(&theta[per..]);
        MaterialModel::new(self.degree, a, b, self.physical_prior, self.include_constant)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("model serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: MaterialModel = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: bad model file: {e}", path.display())))?;
        MaterialModel::new(raw.degree, raw.a, raw.b, raw.physical_prior, raw.include_constant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Gauss-Legendre nodes/weights on [-1,1] by Newton iteration on P_n.
    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                // Evaluate P_n and P_n' at x by recurrence.
                let (mut p0, mut p1) = (1.0, x);
                for k in 1..n {
                    let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    }

    /// Integrates f over [0,1] with 64-point Gauss-Legendre.
    fn integrate01(f: impl Fn(f64) -> f64) -> f64 {
        let (nodes, weights) = gauss_legendre(64);
        nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| 0.5 * w * f(0.5 * (x + 1.0)))
            .sum()
    }

    /// Least-squares projection of f onto the basis over [lo, hi].
    fn project(f: impl Fn(f64) -> f64, degree: usize, lo: f64, hi: f64) -> Vec<f64> {
        let m = 2001;
        let n = degree + 1;
        let mut ata = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut aty = nalgebra::DVector::<f64>::zeros(n);
        for i in 0..m {
            let c = lo + (hi - lo) * i as f64 / (m - 1) as f64;
            let basis = legendre_basis(degree, c).unwrap();
            let y = f(c);
            for r in 0..n {
                aty[r] += basis[r] * y;
                for s in 0..n {
                    ata[(r, s)] += basis[r] * basis[s];
                }
            }
        }
        ata.lu().solve(&aty).unwrap().iter().copied().collect()
    }

    #[test]
    fn constant_and_endpoint_values() {
        for c in [0.0, 0.3, 1.0] {
            assert!((legendre_eval(0, c).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((legendre_eval(1, 1.0).unwrap() - 3.0f64.sqrt()).abs() < 1e-12);
        assert!(legendre_eval(2, -0.1).is_err());
        assert!(legendre_eval(2, 1.1).is_err());
    }

    #[test]
    fn orthonormal_to_1e10_under_quadrature() {
        for m in 0..=11usize {
            for n in 0..=11usize {
                let val = integrate01(|c| {
                    let basis = legendre_basis(11, c).unwrap();
                    basis[m] * basis[n]
                });
                let expect = if m == n { 1.0 } else { 0.0 };
                assert!(
                    (val - expect).abs() < 1e-10,
                    "orthonormality failed at ({m},{n}): {val}"
                );
            }
        }
    }

    #[test]
    fn model_mu_prior_and_series() {
        let zeros = MaterialModel::zeros(3, true);
        assert!((zeros.model_mu(0.5).unwrap()).abs() < 1e-15);
        // Prior alone reproduces the ideal solution.
        assert!((zeros.model_mu(0.2).unwrap() - (0.2f64 / 0.8).ln()).abs() < 1e-14);

        let mut const_only = MaterialModel::zeros(3, false);
        const_only.a[0] = 2.0;
        assert!((const_only.model_mu(0.7).unwrap() - 2.0).abs() < 1e-15);

        assert!(zeros.model_mu(0.0).is_err());
        assert!(zeros.model_mu(1.0).is_err());
    }

    #[test]
    fn degree_one_excess_term_is_exact() {
        // Omega (1 - 2c) is degree 1, so its projection is exact and the
        // prior model reproduces the regular-solution mu_h.
        let omega = 3.0;
        let coeffs = project(|c| omega * (1.0 - 2.0 * c), 1, 0.0, 1.0);
        let model = MaterialModel::new(1, coeffs.clone(), vec![0.0, 0.0], true, true).unwrap();
        for i in 0..=18 {
            let c = 0.05 + 0.90 * i as f64 / 18.0;
            let truth = (c / (1.0 - c)).ln() + omega * (1.0 - 2.0 * c);
            assert!(
                (model.model_mu(c).unwrap() - truth).abs() < 1e-8,
                "mismatch at c={c}"
            );
        }
        // Projection residual of a degree-1 function is at machine scale.
        let back: f64 = {
            let c = 0.37;
            let basis = legendre_basis(1, c).unwrap();
            coeffs[0] * basis[0] + coeffs[1] * basis[1]
        };
        assert!((back - omega * (1.0 - 2.0 * 0.37)).abs() < 1e-12);
    }

    #[test]
    fn model_d_positive_and_matches_projected_ground_truth() {
        let zeros = MaterialModel::zeros(5, true);
        assert!((zeros.model_d(0.42).unwrap() - 1.0).abs() < 1e-15);

        let coeffs = project(|c| (1.0 - c).ln(), 11, 0.01, 0.99);
        let model =
            MaterialModel::new(11, vec![0.0; 12], coeffs, true, true).unwrap();
        for i in 0..=16 {
            let c = 0.1 + 0.8 * i as f64 / 16.0;
            let d = model.model_d(c).unwrap();
            let truth = 1.0 - c;
            assert!(
                (d - truth).abs() / truth < 0.02,
                "D mismatch at c={c}: {d} vs {truth}"
            );
        }

        // Positivity for fuzzed coefficients and arguments.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let degree = 1 + (rng.random::<u32>() % 6) as usize;
            let a = vec![0.0; degree + 1];
            let b: Vec<f64> = (0..=degree).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let model = MaterialModel::new(degree, a, b, false, true).unwrap();
            let c = rng.random::<f64>();
            assert!(model.model_d(c).unwrap() > 0.0);
        }
    }

    #[test]
    fn overflow_guard_fires() {
        let mut model = MaterialModel::zeros(0, false);
        model.b[0] = 60.0;
        assert!(matches!(model.model_d(0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let model = MaterialModel::new(
            2,
            vec![0.1, -0.2, 0.3],
            vec![0.4, 0.5, -0.6],
            true,
            true,
        )
        .unwrap();
        let theta = model.pack();
        assert_eq!(theta.len(), model.n_params());
        let back = model.unpack(&theta).unwrap();
        assert_eq!(back, model);

        let no_const = MaterialModel::new(
            2,
            vec![0.0, -0.2, 0.3],
            vec![0.0, 0.5, -0.6],
            true,
            false,
        )
        .unwrap();
        assert_eq!(no_const.n_params(), 4);
        let theta = no_const.pack();
        assert_eq!(theta, vec![-0.2, 0.3, 0.5, -0.6]);
        assert_eq!(no_const.unpack(&theta).unwrap(), no_const);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = MaterialModel::new(3, vec![0.0; 4], vec![0.1, 0.2, 0.3, 0.4], true, true).unwrap();
        model.write_json(&path).unwrap();
        assert_eq!(MaterialModel::read_json(&path).unwrap(), model);
    }
}
