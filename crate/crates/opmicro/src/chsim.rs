//! Pseudo-spectral Cahn-Hilliard solver on a periodic square domain.
//!
//! Dynamics: dc/dt = div( D(c) c grad( mu_h(c) - kappa lap c ) ). Spatial
//! derivatives are Fourier-spectral with 2/3-rule de-aliasing of the
//! nonlinear flux; time stepping is first-order IMEX with a stabilizing
//! split that treats `Mbar kappa lap^2 c` implicitly, where `Mbar` bounds
//! the mobility `D(c) c` from above. The zero mode is untouched by the
//! update, so the spatial mean is conserved to round-off.

use crate::fft::{wavenumbers, Fft2};
use crate::fieldstore::{FrameStack, ScalarField};
use crate::legendre::MaterialModel;
use crate::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Magnitude at which a trajectory is declared divergent (compositions are
/// order-1, so six decades of headroom cannot flag legitimate transients).
const STATE_BOUND: f64 = 1e6;

/// Simulation parameters. `n_frames` saved frames (including t = 0) spaced
/// `frame_stride` steps apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChParams {
    pub omega: f64,
    pub kappa: f64,
    pub nx: usize,
    pub ny: usize,
    pub domain_length: f64,
    pub dt: f64,
    pub n_frames: usize,
    pub frame_stride: usize,
    /// Clamp applied to c before evaluating logarithms in the law.
    pub c_floor: f64,
}

impl Default for ChParams {
    fn default() -> Self {
        ChParams {
            omega: 3.0,
            kappa: 2e-3,
            nx: 128,
            ny: 128,
            domain_length: 1.0,
            dt: 1e-4,
            n_frames: 501,
            frame_stride: 40,
            c_floor: 1e-6,
        }
    }
}

impl ChParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::invalid("kappa must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !self.nx.is_power_of_two() || !self.ny.is_power_of_two() {
            return Err(Error::invalid("grid sides must be powers of two"));
        }
        if self.n_frames < 2 {
            return Err(Error::invalid("n_frames must be at least 2"));
        }
        if self.frame_stride == 0 {
            return Err(Error::invalid("frame_stride must be at least 1"));
        }
        if !(self.domain_length > 0.0) {
            return Err(Error::invalid("domain_length must be positive"));
        }
        if !(self.c_floor > 0.0 && self.c_floor < 0.5) {
            return Err(Error::invalid("c_floor must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.nx as f64
    }
}

/// Constitutive law: homogeneous chemical potential and diffusivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaterialLaw {
    /// Regular solution mu_h = ln(c/(1-c)) + omega (1-2c) with D = 1 - c.
    GroundTruth { omega: f64 },
    /// Legendre-parameterized model.
    LegendreModel(MaterialModel),
}

impl MaterialLaw {
    pub fn mu_h(&self, c: f64) -> f64 {
        match self {
            MaterialLaw::GroundTruth { omega } => (c / (1.0 - c)).ln() + omega * (1.0 - 2.0 * c),
            MaterialLaw::LegendreModel(m) => m.model_mu(c).unwrap_or(f64::NAN),
        }
    }

    pub fn diffusivity(&self, c: f64) -> f64 {
        match self {
            MaterialLaw::GroundTruth { .. } => 1.0 - c,
            MaterialLaw::LegendreModel(m) => m.model_d(c).unwrap_or(f64::NAN),
        }
    }

    /// Mobility D(c) c entering the flux.
    pub fn mobility(&self, c: f64) -> f64 {
        self.diffusivity(c) * c
    }

    pub fn provenance(&self) -> &'static str {
        match self {
            MaterialLaw::GroundTruth { .. } => "ground_truth",
            MaterialLaw::LegendreModel(_) => "legendre_model",
        }
    }

    /// Free-energy density g with g'(c) = mu_h(c), fixed to g(1/2) offset 0
    /// for the ground-truth law; numeric integral from 1/2 for models.
    pub fn energy_density(&self, c: f64, c_floor: f64) -> f64 {
        let cc = c.clamp(c_floor, 1.0 - c_floor);
        match self {
            MaterialLaw::GroundTruth { omega } => {
                cc * cc.ln() + (1.0 - cc) * (1.0 - cc).ln() + omega * cc * (1.0 - cc)
            }
            MaterialLaw::LegendreModel(_) => {
                // Composite Simpson from 1/2 to cc; diagnostics only.
                let n = 64;
                let h = (cc - 0.5) / n as f64;
                if h == 0.0 {
                    return 0.0;
                }
                let mut acc = self.mu_h(0.5) + self.mu_h(cc);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * self.mu_h(0.5 + i as f64 * h);
                }
                acc * h / 3.0
            }
        }
    }
}

/// The regular-solution ground truth with Omega = 3.
pub fn ground_truth_law() -> MaterialLaw {
    MaterialLaw::GroundTruth { omega: 3.0 }
}

/// One-trajectory spectral workspace; owns plans, wavenumbers, and buffers.
pub struct Solver {
    nx: usize,
    ny: usize,
    n: usize,
    dt: f64,
    kappa: f64,
    c_floor: f64,
    mbar: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    /// 1 / (1 + dt Mbar kappa k^4) per mode.
    inv_denom: Vec<f64>,
    /// dt Mbar kappa k^4 per mode (explicit stabilizer counterpart).
    stab: Vec<f64>,
    dealias: Vec<bool>,
    neg: Vec<u32>,
    fft: Fft2,
    law: MaterialLaw,
    mu: Vec<f64>,
    mob: Vec<f64>,
    chat: Vec<Complex64>,
    work: Vec<Complex64>,
    flux: Vec<Complex64>,
}

impl Solver {
    pub fn new(params: &ChParams, law: &MaterialLaw) -> Result<Self> {
        params.validate()?;
        let (nx, ny) = (params.nx, params.ny);
        let n = nx * ny;

        // Reject laws that are non-finite or non-positive anywhere on the
        // clamped composition range before time stepping begins.
        let mut mbar: f64 = 0.0;
        let grid_pts = 2001;
        for i in 0..grid_pts {
            let c = params.c_floor
                + (1.0 - 2.0 * params.c_floor) * i as f64 / (grid_pts - 1) as f64;
            let d = law.diffusivity(c);
            let mu = law.mu_h(c);
            if !d.is_finite() || !mu.is_finite() {
                return Err(Error::numeric(format!(
                    "material law is non-finite at c={c:.6} (D={d}, mu={mu})"
                )));
            }
            if d <= 0.0 {
                return Err(Error::numeric(format!(
                    "diffusivity must be positive, got {d} at c={c:.6}"
                )));
            }
            mbar = mbar.max(d * c);
        }

        let kxv = wavenumbers(nx, params.domain_length);
        let kyv = wavenumbers(ny, params.domain_length);
        let mut kx = vec![0.0; n];
        let mut ky = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut inv_denom = vec![0.0; n];
        let mut stab = vec![0.0; n];
        let mut dealias = vec![false; n];
        let mut neg = vec![0u32; n];
        let cut_x = nx / 3;
        let cut_y = ny / 3;
        for iy in 0..ny {
            let my = if iy <= ny / 2 { iy } else { ny - iy };
            for ix in 0..nx {
                let idx = iy * nx + ix;
                let mx = if ix <= nx / 2 { ix } else { nx - ix };
                kx[idx] = kxv[ix];
                ky[idx] = kyv[iy];
                let ksq = kxv[ix] * kxv[ix] + kyv[iy] * kyv[iy];
                k2[idx] = ksq;
                let s = params.dt * mbar * params.kappa * ksq * ksq;
                stab[idx] = s;
                inv_denom[idx] = 1.0 / (1.0 + s);
                dealias[idx] = mx > cut_x || my > cut_y;
                let jx = (nx - ix) % nx;
                let jy = (ny - iy) % ny;
                neg[idx] = (jy * nx + jx) as u32;
            }
        }

        Ok(Solver {
            nx,
            ny,
            n,
            dt: params.dt,
            kappa: params.kappa,
            c_floor: params.c_floor,
            mbar,
            kx,
            ky,
            k2,
            inv_denom,
            stab,
            dealias,
            neg,
            fft: Fft2::new(ny, nx),
            law: law.clone(),
            mu: vec![0.0; n],
            mob: vec![0.0; n],
            chat: vec![Complex64::default(); n],
            work: vec![Complex64::default(); n],
            flux: vec![Complex64::default(); n],
        })
    }

    /// Upper mobility bound used by the stabilizing split.
    pub fn mbar(&self) -> f64 {
        self.mbar
    }

    fn load_state(&mut self, c: &[f64]) {
        for (dst, &src) in self.chat.iter_mut().zip(c) {
            *dst = Complex64::new(src, 0.0);
        }
        self.fft.forward(&mut self.chat);
    }

    /// Advances `c` by one time step. `c` and the internal spectral state
    /// must be consistent (callers go through `run`).
    fn step(&mut self, c: &mut [f64]) -> Result<()> {
        // mu_h and mobility on the floor-clamped composition.
        for i in 0..self.n {
            let cc = c[i].clamp(self.c_floor, 1.0 - self.c_floor);
            self.mu[i] = self.law.mu_h(cc);
            self.mob[i] = self.law.diffusivity(cc) * cc;
        }

        // mu_hat = F(mu_h) + kappa k^2 c_hat  (full chemical potential).
        for i in 0..self.n {
            self.work[i] = Complex64::new(self.mu[i], 0.0);
        }
        self.fft.forward(&mut self.work);
        for i in 0..self.n {
            self.work[i] += self.kappa * self.k2[i] * self.chat[i];
        }

        // Both gradient components from one inverse transform:
        // F^-1[ (i kx - ky) mu_hat ] = d_x mu + i d_y mu.
        for i in 0..self.n {
            let m = self.work[i];
            self.work[i] = Complex64::new(-self.ky[i], self.kx[i]) * m;
        }
        self.fft.inverse(&mut self.work);

        // Fluxes packed as Jx + i Jy, one forward transform.
        for i in 0..self.n {
            let g = self.work[i];
            self.flux[i] = Complex64::new(self.mob[i] * g.re, self.mob[i] * g.im);
        }
        self.fft.forward(&mut self.flux);

        // Divergence with Hermitian unpacking and 2/3-rule de-aliasing:
        // Jx_hat = (Z + conj(Z_-k))/2, Jy_hat = (Z - conj(Z_-k))/(2i).
        for i in 0..self.n {
            if self.dealias[i] {
                self.work[i] = Complex64::default();
                continue;
            }
            let z = self.flux[i];
            let zm = self.flux[self.neg[i] as usize].conj();
            let jx = 0.5 * (z + zm);
            let jy = Complex64::new(0.0, -0.5) * (z - zm);
            let div = Complex64::new(0.0, 1.0) * (self.kx[i] * jx + self.ky[i] * jy);
            self.work[i] = div;
        }

        // IMEX update; the k = 0 mode has flux 0 and stabilizer 0, so the
        // mean passes through bit-exactly.
        for i in 0..self.n {
            self.chat[i] = (self.chat[i] + self.dt * self.work[i] + self.stab[i] * self.chat[i])
                * self.inv_denom[i];
        }

        self.work.copy_from_slice(&self.chat);
        self.fft.inverse(&mut self.work);
        for i in 0..self.n {
            c[i] = self.work[i].re;
        }
        // Composition is order-1; clamped evaluation keeps unstable laws
        // finite but meaningless, so runaway magnitude counts as divergence
        // alongside NaN/inf.
        if c.iter().any(|v| !v.is_finite() || v.abs() > STATE_BOUND) {
            return Err(Error::numeric("divergent state"));
        }
        Ok(())
    }

    /// Integrates `n_steps` from `c0` and returns the final field.
    pub fn run(&mut self, c0: &ScalarField, n_steps: usize) -> Result<ScalarField> {
        let (h, w) = c0.shape();
        if h != self.ny || w != self.nx {
            return Err(Error::invalid(format!(
                "initial condition is {h}x{w}, grid is {}x{}",
                self.ny, self.nx
            )));
        }
        let mut c = c0.as_slice().to_vec();
        self.load_state(&c);
        for step in 0..n_steps {
            self.step(&mut c).map_err(|_| Error::BlowUp {
                last_stable_frame: step,
            })?;
        }
        c0.like(Array2::from_shape_vec((h, w), c).expect("same size"))
    }
}

/// Runs the full trajectory, saving `n_frames` snapshots (the initial
/// condition first). Blow-up aborts with the index of the last saved frame.
///
/// `seed` does not affect the integration (there is no stochastic forcing);
/// it is recorded so artifacts remain traceable to the run that produced
/// their initial condition.
pub fn simulate(
    params: &ChParams,
    law: &MaterialLaw,
    c0: &ScalarField,
    seed: u64,
) -> Result<FrameStack> {
    if c0.as_slice().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::invalid("initial condition must lie strictly in (0,1)"));
    }
    if c0.shape() != (params.ny, params.nx) {
        return Err(Error::invalid(format!(
            "initial condition is {:?}, grid is ({}, {})",
            c0.shape(),
            params.ny,
            params.nx
        )));
    }
    let mut solver = Solver::new(params, law)?;
    let (h, w) = c0.shape();
    let mut c = c0.as_slice().to_vec();
    solver.load_state(&c);

    let mut frames = Vec::with_capacity(params.n_frames);
    let mut times = Vec::with_capacity(params.n_frames);
    let push = |frames: &mut Vec<ScalarField>, data: &[f64]| -> Result<()> {
        let mut f = ScalarField::from_vec(h, w, data.to_vec())?;
        f.pixel_size = Some(params.dx());
        f.value_range = Some((0.0, 1.0));
        frames.push(f);
        Ok(())
    };
    push(&mut frames, &c)?;
    times.push(0.0);

    for frame in 1..params.n_frames {
        for _ in 0..params.frame_stride {
            solver.step(&mut c).map_err(|_| Error::BlowUp {
                last_stable_frame: frame - 1,
            })?;
        }
        push(&mut frames, &c)?;
        times.push(frame as f64 * params.frame_stride as f64 * params.dt);
    }

    let mut stack = FrameStack::single_channel(frames, Some(times))?;
    stack.meta.kind = Some("concentration".into());
    stack.meta.pixel_size = Some(params.dx());
    stack.meta.value_range = Some((0.0, 1.0));
    stack.meta.units = Some(
        [("seed".to_string(), seed.to_string())]
            .into_iter()
            .collect(),
    );
    Ok(stack)
}

/// Integrates `n_steps` without saving intermediate frames (shooting segments).
pub fn evolve(
    params: &ChParams,
    law: &MaterialLaw,
    c0: &ScalarField,
    n_steps: usize,
) -> Result<ScalarField> {
    Solver::new(params, law)?.run(c0, n_steps)
}

/// Uniform random initial condition c ~ U(mean - amp, mean + amp).
pub fn random_initial_condition(
    params: &ChParams,
    mean: f64,
    amp: f64,
    seed: u64,
) -> Result<ScalarField> {
    if !(amp > 0.0) || mean - amp <= 0.0 || mean + amp >= 1.0 {
        return Err(Error::invalid("initial-condition band must stay inside (0,1)"));
    }
    let dist = Uniform::new(mean - amp, mean + amp)
        .map_err(|e| Error::invalid(format!("bad uniform bounds: {e}")))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..params.nx * params.ny)
        .map(|_| dist.sample(&mut rng))
        .collect();
    let mut f = ScalarField::from_vec(params.ny, params.nx, values)?;
    f.pixel_size = Some(params.dx());
    f.value_range = Some((0.0, 1.0));
    Ok(f)
}

/// Generates independent realizations of the regular-solution ground truth
/// (interaction strength `params.omega`), one derived seed per realization.
pub fn make_dataset(params: &ChParams, n_realizations: usize, seed: u64) -> Result<Vec<FrameStack>> {
    if n_realizations == 0 {
        return Err(Error::invalid("need at least one realization"));
    }
    let law = MaterialLaw::GroundTruth {
        omega: params.omega,
    };
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_realizations).map(|_| master.random()).collect();
    seeds
        .par_iter()
        .map(|&s| {
            let c0 = random_initial_condition(params, 0.5, 0.05, s)?;
            simulate(params, &law, &c0, s)
        })
        .collect()
}

/// Spatial mean of c (the conserved quantity).
pub fn total_mass(field: &ScalarField) -> f64 {
    field.mean()
}

/// Discrete free energy: integral of g(c) + (kappa/2)|grad c|^2 with the
/// gradient evaluated spectrally.
pub fn free_energy(field: &ScalarField, law: &MaterialLaw, params: &ChParams) -> f64 {
    let (h, w) = field.shape();
    let n = h * w;
    let mut buf: Vec<Complex64> = field
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let mut fft = Fft2::new(h, w);
    fft.forward(&mut buf);
    let kxv = wavenumbers(w, params.domain_length);
    let kyv = wavenumbers(h, params.domain_length);
    let mut grad_sq = 0.0;
    for iy in 0..h {
        for ix in 0..w {
            let ksq = kxv[ix] * kxv[ix] + kyv[iy] * kyv[iy];
            grad_sq += ksq * buf[iy * w + ix].norm_sqr();
        }
    }
    grad_sq /= (n * n) as f64;
    let bulk: f64 = field
        .as_slice()
        .iter()
        .map(|&c| law.energy_density(c, params.c_floor))
        .sum::<f64>()
        / n as f64;
    let area = params.domain_length * params.domain_length;
    area * (bulk + 0.5 * params.kappa * grad_sq)
}

/// Interface length: crossings of the level set, counted along both axes
/// with periodic wrap, times the pixel spacing.
pub fn interface_length(field: &ScalarField, level: f64, dx: f64) -> f64 {
    let (h, w) = field.shape();
    let d = field.data();
    let mut crossings = 0usize;
    for y in 0..h {
        for x in 0..w {
            let here = d[(y, x)] > level;
            if here != (d[(y, (x + 1) % w)] > level) {
                crossings += 1;
            }
            if here != (d[((y + 1) % h, x)] > level) {
                crossings += 1;
            }
        }
    }
    crossings as f64 * dx
}

/// Amplitude of the cosine mode (mx, my): 2|c_hat| / N for a real field.
pub fn mode_amplitude(field: &ScalarField, mx: usize, my: usize) -> f64 {
    let (h, w) = field.shape();
    let mut buf: Vec<Complex64> = field
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let mut fft = Fft2::new(h, w);
    fft.forward(&mut buf);
    2.0 * buf[my * w + mx].norm() / (h * w) as f64
}

/// Linear growth rate sigma(k) of a perturbation about the uniform state.
pub fn dispersion_rate(law: &MaterialLaw, cbar: f64, kappa: f64, k: f64) -> f64 {
    let eps = 1e-6;
    let dmu = (law.mu_h(cbar + eps) - law.mu_h(cbar - eps)) / (2.0 * eps);
    -law.mobility(cbar) * k * k * (dmu + kappa * k * k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ChParams {
        ChParams {
            nx: 32,
            ny: 32,
            dt: 2e-4,
            n_frames: 6,
            frame_stride: 50,
            ..ChParams::default()
        }
    }

    #[test]
    fn ground_truth_values() {
        let law = ground_truth_law();
        assert!(law.mu_h(0.5).abs() < 1e-15);
        // ln(1/9) + 2.4 evaluated independently.
        assert!((law.mu_h(0.1) - 0.2027754227_f64).abs() < 1e-9);
        assert!((law.diffusivity(0.3) - 0.7).abs() < 1e-15);
        assert!((law.mu_h(0.9) + law.mu_h(0.1)).abs() < 1e-12);
    }

    #[test]
    fn uniform_state_is_fixed_point() {
        let params = small_params();
        let c0 = ScalarField::constant(32, 32, 0.5).unwrap();
        let stack = simulate(&params, &ground_truth_law(), &c0, 0).unwrap();
        for t in 0..stack.n_frames() {
            for (&a, &b) in stack.frame(t).as_slice().iter().zip(c0.as_slice()) {
                assert_eq!(a, b, "uniform state drifted at frame {t}");
            }
        }
    }

    #[test]
    fn mass_conserved_and_deterministic() {
        let params = small_params();
        let c0 = random_initial_condition(&params, 0.5, 0.05, 3).unwrap();
        let a = simulate(&params, &ground_truth_law(), &c0, 3).unwrap();
        let b = simulate(&params, &ground_truth_law(), &c0, 3).unwrap();
        let m0 = total_mass(a.frame(0));
        for t in 0..a.n_frames() {
            assert!(((total_mass(a.frame(t)) - m0) / m0).abs() <= 1e-10);
            assert_eq!(a.frame(t).data(), b.frame(t).data(), "nondeterministic at {t}");
        }
    }

    #[test]
    fn dispersion_matches_linear_theory() {
        // Domain sized so the fastest-growing wavenumber sits exactly on
        // grid mode 4; amplitudes stay well inside the linear regime.
        let law = ground_truth_law();
        let kstar = (2.0f64 / (2.0 * 2e-3)).sqrt();
        let m = 4.0;
        let params = ChParams {
            nx: 64,
            ny: 64,
            domain_length: 2.0 * std::f64::consts::PI * m / kstar,
            dt: 2e-5,
            n_frames: 11,
            frame_stride: 50,
            ..ChParams::default()
        };
        let (h, w) = (params.ny, params.nx);
        let mut values = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let xx = params.domain_length * x as f64 / w as f64;
                values[y * w + x] = 0.5 + 1e-3 * (kstar * xx).cos();
            }
        }
        let c0 = ScalarField::from_vec(h, w, values).unwrap();
        let stack = simulate(&params, &law, &c0, 0).unwrap();

        // Least-squares slope of ln(amplitude) over time.
        let ts = stack.times();
        let amps: Vec<f64> = (0..stack.n_frames())
            .map(|t| mode_amplitude(stack.frame(t), 4, 0).ln())
            .collect();
        let n = ts.len() as f64;
        let tm = ts.iter().sum::<f64>() / n;
        let am = amps.iter().sum::<f64>() / n;
        let slope = ts
            .iter()
            .zip(&amps)
            .map(|(&t, &a)| (t - tm) * (a - am))
            .sum::<f64>()
            / ts.iter().map(|&t| (t - tm) * (t - tm)).sum::<f64>();

        let sigma = dispersion_rate(&law, 0.5, params.kappa, kstar);
        assert!(sigma > 0.0);
        assert!(
            ((slope - sigma) / sigma).abs() < 0.05,
            "measured {slope}, theory {sigma}"
        );
    }

    #[test]
    fn energy_non_increasing_and_coarsening() {
        let params = ChParams {
            nx: 32,
            ny: 32,
            dt: 1e-4,
            n_frames: 9,
            frame_stride: 250,
            ..ChParams::default()
        };
        let law = ground_truth_law();
        let c0 = random_initial_condition(&params, 0.5, 0.05, 11).unwrap();
        let stack = simulate(&params, &law, &c0, 11).unwrap();
        let energies: Vec<f64> = (0..stack.n_frames())
            .map(|t| free_energy(stack.frame(t), &law, &params))
            .collect();
        for pair in energies.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "energy increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        // All values stay inside (0,1) after clamping behavior.
        for t in 0..stack.n_frames() {
            for &v in stack.frame(t).as_slice() {
                assert!(v > -0.05 && v < 1.05);
            }
        }
    }

    #[test]
    fn dataset_realizations_distinct_and_deterministic() {
        let params = ChParams {
            nx: 16,
            ny: 16,
            dt: 1e-4,
            n_frames: 2,
            frame_stride: 5,
            ..ChParams::default()
        };
        let a = make_dataset(&params, 2, 123).unwrap();
        let b = make_dataset(&params, 2, 123).unwrap();
        assert_eq!(a[0].frame(0).data(), b[0].frame(0).data());
        assert_eq!(a[1].frame(1).data(), b[1].frame(1).data());
        assert_ne!(a[0].frame(0).data(), a[1].frame(0).data());
    }

    #[test]
    fn blow_up_is_detected() {
        // A steep anti-diffusive excess drives the explicit terms unstable.
        let mut model = MaterialModel::zeros(1, false);
        model.a[1] = -1e6;
        let law = MaterialLaw::LegendreModel(model);
        let params = ChParams {
            nx: 16,
            ny: 16,
            dt: 1e-3,
            n_frames: 40,
            frame_stride: 20,
            ..ChParams::default()
        };
        let c0 = random_initial_condition(&params, 0.5, 0.05, 5).unwrap();
        match simulate(&params, &law, &c0, 5) {
            Err(Error::BlowUp { last_stable_frame }) => assert!(last_stable_frame < 40),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_initial_condition() {
        let params = small_params();
        let c0 = ScalarField::constant(32, 32, 1.0).unwrap();
        assert!(simulate(&params, &ground_truth_law(), &c0, 0).is_err());
        let wrong_shape = ScalarField::constant(16, 16, 0.5).unwrap();
        assert!(simulate(&params, &ground_truth_law(), &wrong_shape, 0).is_err());
    }
}
