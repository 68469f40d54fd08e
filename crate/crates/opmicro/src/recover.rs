//! PDE-constrained recovery of the material model from snapshot pairs:
//! multiple shooting residuals, Levenberg–Marquardt with L2 regularization,
//! and bootstrap uncertainty bands over pair resamples.

use crate::chsim::{ChParams, MaterialLaw, Solver};
use crate::fieldstore::ScalarField;
use crate::legendre::MaterialModel;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Residual value substituted for every pixel of a pair whose forward
/// simulation diverged: large enough to dominate any physical cost, finite
/// so the optimizer can still rank and reject the step.
pub const BLOWUP_PENALTY: f64 = 1e3;

/// Fixed composition grid for reporting mu_h/D curves and bootstrap bands.
pub const C_GRID_LEN: usize = 101;

pub fn c_grid() -> Vec<f64> {
    (0..C_GRID_LEN)
        .map(|i| 0.01 + 0.98 * i as f64 / (C_GRID_LEN - 1) as f64)
        .collect()
}

/// Snapshot-pair fitting problem. `pairs` holds indices into `snapshots`;
/// the default is every consecutive pair, and bootstrap replicas swap in
/// resampled multisets.
#[derive(Debug, Clone)]
pub struct ShootingProblem {
    snapshots: Vec<(f64, ScalarField)>,
    pairs: Vec<(usize, usize)>,
    steps: Vec<usize>,
    pub sim_params: ChParams,
    pub model0: MaterialModel,
    pub reg_lambda: f64,
}

impl ShootingProblem {
    /// Builds the problem over consecutive snapshot pairs. `obs_clip`
    /// clamps observed snapshots into the given range at construction
    /// (measurement data is clipped to [0.01, 0.99]; pass `None` for raw
    /// solver output).
    pub fn new(
        snapshots: Vec<(f64, ScalarField)>,
        sim_params: ChParams,
        model0: MaterialModel,
        reg_lambda: f64,
        obs_clip: Option<(f64, f64)>,
    ) -> Result<Self> {
        sim_params.validate()?;
        if snapshots.len() < 2 {
            return Err(Error::invalid("need at least two snapshots"));
        }
        if !(reg_lambda >= 0.0 && reg_lambda.is_finite()) {
            return Err(Error::invalid("reg_lambda must be finite and non-negative"));
        }
        for window in snapshots.windows(2) {
            if !(window[1].0 > window[0].0) {
                return Err(Error::invalid("snapshot times must be strictly increasing"));
            }
        }
        let shape = (sim_params.ny, sim_params.nx);
        for (t, f) in &snapshots {
            if f.shape() != shape {
                return Err(Error::invalid(format!(
                    "snapshot at t={t} is {:?}, grid is {shape:?}",
                    f.shape()
                )));
            }
        }
        let snapshots = match obs_clip {
            Some((lo, hi)) => {
                if !(lo < hi) {
                    return Err(Error::invalid("obs_clip bounds must satisfy lo < hi"));
                }
                snapshots
                    .into_iter()
                    .map(|(t, f)| {
                        let clipped = f.like(f.data().mapv(|v| v.clamp(lo, hi)))?;
                        Ok((t, clipped))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => snapshots,
        };
        let pairs: Vec<(usize, usize)> = (0..snapshots.len() - 1).map(|i| (i, i + 1)).collect();
        let mut problem = ShootingProblem {
            snapshots,
            pairs: Vec::new(),
            steps: Vec::new(),
            sim_params,
            model0,
            reg_lambda,
        };
        problem.set_pairs(pairs)?;
        Ok(problem)
    }

    /// Replaces the pair multiset (indices into the snapshot list). An empty
    /// list is legal and yields empty data residuals.
    pub fn set_pairs(&mut self, pairs: Vec<(usize, usize)>) -> Result<()> {
        let dt = self.sim_params.dt;
        let mut steps = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= self.snapshots.len() || j >= self.snapshots.len() || i >= j {
                return Err(Error::invalid(format!("bad snapshot pair ({i}, {j})")));
            }
            let span = self.snapshots[j].0 - self.snapshots[i].0;
            let n = (span / dt).round();
            if n < 1.0 || ((n * dt - span) / dt).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "pair ({i}, {j}) time span {span} is not a positive multiple of dt={dt}"
                )));
            }
            steps.push(n as usize);
        }
        self.pairs = pairs;
        self.steps = steps;
        Ok(())
    }

    pub fn with_pairs(mut self, pairs: Vec<(usize, usize)>) -> Result<Self> {
        self.set_pairs(pairs)?;
        Ok(self)
    }

    pub fn snapshots(&self) -> &[(f64, ScalarField)] {
        &self.snapshots
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn pixels_per_pair(&self) -> usize {
        self.sim_params.nx * self.sim_params.ny
    }

    /// Multiple-shooting residuals for a candidate model: for each pair,
    /// simulate the initial snapshot forward to the final time and subtract
    /// the observed final snapshot; then `sqrt(reg_lambda) * theta` rows.
    /// A diverging pair contributes `BLOWUP_PENALTY` rows and sets the flag.
    pub fn residuals(&self, model: &MaterialModel) -> Result<ResidualEval> {
        if model.degree != self.model0.degree
            || model.physical_prior != self.model0.physical_prior
            || model.include_constant != self.model0.include_constant
        {
            return Err(Error::invalid(
                "candidate model shape does not match the problem's model0",
            ));
        }
        let n_px = self.pixels_per_pair();
        let mut r = Vec::with_capacity(self.pairs.len() * n_px + model.n_params());
        let mut blew_up = false;

        let law = MaterialLaw::LegendreModel(model.clone());
        let mut solver = match Solver::new(&self.sim_params, &law) {
            Ok(s) => Some(s),
            Err(_) => {
                // The law itself is unusable (non-finite or non-positive on
                // the clamp range): penalize every pair.
                blew_up = true;
                None
            }
        };
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            let outcome = solver
                .as_mut()
                .map(|s| s.run(&self.snapshots[i].1, self.steps[k]));
            match outcome {
                Some(Ok(sim)) => {
                    let target = &self.snapshots[j].1;
                    r.extend(
                        sim.as_slice()
                            .iter()
                            .zip(target.as_slice())
                            .map(|(s, o)| s - o),
                    );
                }
                Some(Err(_)) | None => {
                    blew_up = true;
                    r.extend(std::iter::repeat(BLOWUP_PENALTY).take(n_px));
                }
            }
        }
        if self.reg_lambda > 0.0 {
            let sqrt_l = self.reg_lambda.sqrt();
            r.extend(model.pack().iter().map(|t| sqrt_l * t));
        }
        Ok(ResidualEval { r, blew_up })
    }

    /// Mean squared data residual (regularization rows excluded) and the
    /// per-pair breakdown.
    fn data_mse(&self, r: &[f64]) -> (f64, Vec<f64>) {
        let n_px = self.pixels_per_pair();
        let n_data = self.pairs.len() * n_px;
        let mut per_pair = Vec::with_capacity(self.pairs.len());
        for k in 0..self.pairs.len() {
            let chunk = &r[k * n_px..(k + 1) * n_px];
            per_pair.push(chunk.iter().map(|v| v * v).sum::<f64>() / n_px as f64);
        }
        let total = if n_data == 0 {
            0.0
        } else {
            r[..n_data].iter().map(|v| v * v).sum::<f64>() / n_data as f64
        };
        (total, per_pair)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualEval {
    pub r: Vec<f64>,
    pub blew_up: bool,
}

/// Log-spaced snapshot indices over the final two thirds of an `n_frames`
/// trajectory (the window where coarsening is underway), always ending at
/// the last frame.
pub fn select_snapshot_indices(n_frames: usize, n_snapshots: usize) -> Result<Vec<usize>> {
    if n_snapshots < 2 {
        return Err(Error::invalid("need at least two snapshots"));
    }
    let start = (n_frames / 3).max(1);
    let end = n_frames.checked_sub(1).ok_or_else(|| Error::invalid("empty trajectory"))?;
    if end <= start || end - start + 1 < n_snapshots {
        return Err(Error::invalid(format!(
            "cannot place {n_snapshots} snapshots in frames {start}..={end}"
        )));
    }
    let (a, b) = (start as f64, end as f64);
    let mut indices: Vec<usize> = (0..n_snapshots)
        .map(|k| {
            let f = k as f64 / (n_snapshots - 1) as f64;
            (a * (b / a).powf(f)).round() as usize
        })
        .collect();
    // Rounding can collide at the dense end; push duplicates upward.
    for k in 1..indices.len() {
        if indices[k] <= indices[k - 1] {
            indices[k] = indices[k - 1] + 1;
        }
    }
    if *indices.last().unwrap() > end {
        return Err(Error::invalid(
            "snapshot count too dense for log spacing in the target window",
        ));
    }
    Ok(indices)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the max-norm of the gradient J'r falls below this.
    pub gtol: f64,
    /// Stop when the step norm falls below xtol * (1 + parameter norm).
    pub xtol: f64,
    pub damping_init: f64,
    pub damping_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 50,
            gtol: 1e-8,
            xtol: 1e-10,
            damping_init: 1e-2,
            damping_max: 1e12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub c_grid: Vec<f64>,
    pub mu_std: Vec<f64>,
    pub d_std: Vec<f64>,
    pub n_boot: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub model: MaterialModel,
    /// Final 0.5 * sum(r^2) including regularization rows.
    pub final_cost: f64,
    /// Mean squared data residual per pixel (regularization excluded).
    pub residual_mse: f64,
    pub per_pair_mse: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: String,
    pub cost_trace: Vec<f64>,
    pub blow_ups: usize,
    pub bootstrap_band: Option<BootstrapBand>,
}

struct LmOutcome {
    theta: Vec<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
    stop_reason: String,
    cost_trace: Vec<f64>,
    blow_ups: usize,
    final_residuals: Vec<f64>,
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Generic Levenberg–Marquardt over a residual closure. The Jacobian is
/// forward finite differences (h = 1e-4 * max(1, |theta_k|)), columns in
/// parallel; damping multiplies by 3 on rejection and halves on acceptance.
fn lm_minimize(
    theta0: &[f64],
    opts: &LmOptions,
    eval: &(dyn Fn(&[f64]) -> Result<(Vec<f64>, bool)> + Sync),
) -> Result<LmOutcome> {
    let m = theta0.len();
    let (r0, first_blow0) = eval(theta0)?;
    if m == 0 {
        let cost = cost_of(&r0);
        return Ok(LmOutcome {
            theta: Vec::new(),
            cost,
            iterations: 0,
            converged: true,
            stop_reason: "no free parameters".into(),
            cost_trace: vec![cost],
            blow_ups: first_blow0 as usize,
            final_residuals: r0,
        });
    }
    let mut theta = theta0.to_vec();
    let (mut r, first_blow) = (r0, first_blow0);
    let mut cost = cost_of(&r);
    let mut blow_ups = first_blow as usize;
    let mut cost_trace = vec![cost];
    let mut damping = opts.damping_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut stop_reason = "max_iter reached".to_string();

    'outer: while iterations < opts.max_iter {
        iterations += 1;

        // Forward-difference Jacobian, one residual sweep per column.
        let columns: Result<Vec<(Vec<f64>, bool)>> = (0..m)
            .into_par_iter()
            .map(|k| {
                let h = 1e-4 * theta[k].abs().max(1.0);
                let mut t = theta.clone();
                t[k] += h;
                let (rk, blew) = eval(&t)?;
                let col = rk
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| (a - b) / h)
                    .collect::<Vec<f64>>();
                Ok((col, blew))
            })
            .collect();
        let columns = columns?;
        blow_ups += columns.iter().filter(|(_, b)| *b).count();

        let n_rows = r.len();
        let mut jac = DMatrix::<f64>::zeros(n_rows, m);
        for (k, (col, _)) in columns.iter().enumerate() {
            jac.column_mut(k).copy_from_slice(col);
        }
        let rv = DVector::from_column_slice(&r);
        let grad = jac.transpose() * &rv;
        if grad.amax() < opts.gtol {
            converged = true;
            stop_reason = "gradient below gtol".into();
            break;
        }
        let jtj = jac.transpose() * &jac;

        loop {
            let mut lhs = jtj.clone();
            for k in 0..m {
                // Marquardt scaling with a floor so zero-curvature
                // directions stay solvable.
                let d = jtj[(k, k)].max(1e-12);
                lhs[(k, k)] += damping * d;
            }
            let Some(chol) = Cholesky::new(lhs) else {
                damping *= 3.0;
                if damping > opts.damping_max {
                    stop_reason = "damping overflow (singular system)".into();
                    break 'outer;
                }
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let trial: Vec<f64> = theta
                .iter()
                .zip(delta.iter())
                .map(|(t, d)| t + d)
                .collect();
            let (r_trial, blew) = eval(&trial)?;
            blow_ups += blew as usize;
            let trial_cost = cost_of(&r_trial);
            if trial_cost.is_finite() && trial_cost < cost {
                let step_norm = delta.norm();
                let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                theta = trial;
                r = r_trial;
                cost = trial_cost;
                cost_trace.push(cost);
                damping = (damping * 0.5).max(1e-15);
                if step_norm < opts.xtol * (1.0 + theta_norm) {
                    converged = true;
                    stop_reason = "step below xtol".into();
                    break 'outer;
                }
                break;
            }
            damping *= 3.0;
            if damping > opts.damping_max {
                stop_reason = "damping overflow (no acceptable step)".into();
                break 'outer;
            }
        }
    }
    Ok(LmOutcome {
        theta,
        cost,
        iterations,
        converged,
        stop_reason,
        cost_trace,
        blow_ups,
        final_residuals: r,
    })
}

/// Solves the shooting problem with default options.
pub fn levenberg_marquardt(problem: &ShootingProblem) -> Result<RecoveryResult> {
    levenberg_marquardt_with(problem, &LmOptions::default())
}

pub fn levenberg_marquardt_with(
    problem: &ShootingProblem,
    opts: &LmOptions,
) -> Result<RecoveryResult> {
    let theta0 = problem.model0.pack();
    let eval = |theta: &[f64]| -> Result<(Vec<f64>, bool)> {
        let model = problem.model0.unpack(theta)?;
        let ev = problem.residuals(&model)?;
        Ok((ev.r, ev.blew_up))
    };
    let outcome = lm_minimize(&theta0, opts, &eval)?;
    let model = problem.model0.unpack(&outcome.theta)?;
    let (residual_mse, per_pair_mse) = problem.data_mse(&outcome.final_residuals);
    Ok(RecoveryResult {
        model,
        final_cost: outcome.cost,
        residual_mse,
        per_pair_mse,
        iterations: outcome.iterations,
        converged: outcome.converged,
        stop_reason: outcome.stop_reason,
        cost_trace: outcome.cost_trace,
        blow_ups: outcome.blow_ups,
        bootstrap_band: None,
    })
}

/// Evaluates mu_h and D on the fixed reporting grid.
pub fn evaluate_on_grid(model: &MaterialModel) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = c_grid();
    let mut mu = Vec::with_capacity(grid.len());
    let mut d = Vec::with_capacity(grid.len());
    for &c in &grid {
        mu.push(model.model_mu(c)?);
        d.push(model.model_d(c)?);
    }
    Ok((grid, mu, d))
}

/// Base fit plus bootstrap bands: pairs are resampled with replacement,
/// each replicate is re-solved starting from the base fit, and the bands
/// are the per-grid-point population standard deviations of mu_h and D.
pub fn bootstrap_recovery(
    problem: &ShootingProblem,
    n_boot: usize,
    seed: u64,
) -> Result<RecoveryResult> {
    bootstrap_recovery_with(problem, n_boot, seed, &LmOptions::default(), &LmOptions::default())
}

pub fn bootstrap_recovery_with(
    problem: &ShootingProblem,
    n_boot: usize,
    seed: u64,
    base_opts: &LmOptions,
    replicate_opts: &LmOptions,
) -> Result<RecoveryResult> {
    if n_boot == 0 {
        return Err(Error::invalid("n_boot must be at least 1"));
    }
    if problem.n_pairs() == 0 {
        return Err(Error::invalid("cannot bootstrap a problem with no pairs"));
    }
    let mut base = levenberg_marquardt_with(problem, base_opts)?;

    let curves: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(1 + b as u64);
            let n = problem.n_pairs();
            let resampled: Vec<(usize, usize)> = (0..n)
                .map(|_| problem.pairs[rng.random_range(0..n)])
                .collect();
            let mut replica = problem.clone().with_pairs(resampled)?;
            replica.model0 = base.model.clone();
            let fit = levenberg_marquardt_with(&replica, replicate_opts)?;
            let (_, mu, d) = evaluate_on_grid(&fit.model)?;
            Ok((mu, d))
        })
        .collect();
    let curves = curves?;

    let grid = c_grid();
    let std_at = |extract: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, i: usize| -> f64 {
        let vals: Vec<f64> = curves.iter().map(|c| extract(c)[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    let mu_std: Vec<f64> = (0..grid.len()).map(|i| std_at(&|c| &c.0, i)).collect();
    let d_std: Vec<f64> = (0..grid.len()).map(|i| std_at(&|c| &c.1, i)).collect();

    base.bootstrap_band = Some(BootstrapBand {
        c_grid: grid,
        mu_std,
        d_std,
        n_boot,
    });
    Ok(base)
}
