//! Expectation-maximization for the couplings and fields.
//!
//! With the auxiliary variables integrated out through their conditional
//! means, the expected complete-data log-likelihood is quadratic in each
//! stacked row `(theta_i, J_i1, ..., J_iN)`. Every M-step therefore solves
//! `N` independent symmetric positive-definite systems `A_i J_i = b_i`.
//! An L1 penalty `lambda sum |J_ij|` adds `lambda^2 <beta_ij>` to the
//! diagonal of the coupling slots.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{IntervalTable, IsingModel, SpinTrajectory};
use crate::moments::{gig_beta_mean, pg_mean, AugmentedMoments, J_FLOOR, PG_SERIES_CUTOFF};
use crate::numerics::softplus;
use crate::sweep::{augmented_initial_state, walk, GramAccumulator, IntervalVisitor, LinearTracker};

/// Largest ridge tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum EmInit {
    Zeros,
    Given(IsingModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when the relative change of the objective drops below this.
    pub tol: f64,
    /// L1 scale; 0 disables the penalty.
    pub lambda: f64,
    pub init: EmInit,
    /// Ridge added to every system before factorizing.
    pub jitter: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-8, lambda: 0.0, init: EmInit::Zeros, jitter: 1e-10 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        Ok(())
    }
}

/// One `A_i`, `b_i` pair per spin, indexed `(theta_i, J_i1, ..., J_iN)`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl LinearSystem {
    pub fn n_spins(&self) -> usize {
        self.b.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmIteration {
    pub iter: usize,
    pub loglik: f64,
    /// `loglik - lambda * sum_ij phi(J_ij)`; equals `loglik` when `lambda = 0`.
    pub penalized_obj: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: IsingModel,
    pub trace: Vec<EmIteration>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Naive assembly of the M-step systems from tabulated moments:
///
/// `b_i = -sum_{t in F(i)} s_i x(t) + sum_n <rho_i^n> s_i^n x^n`
/// `A_i = 4 (sum_{t in F(i)} <omega_i(t)> x x^T + sum_n <omega_i^n> x^n x^n^T)`
///
/// with `x = (1, s_1, ..., s_N)` the configuration before each flip.
pub fn assemble_system(table: &IntervalTable, moments: &AugmentedMoments) -> Result<LinearSystem> {
    moments.check_matches(table)?;
    let n = table.n_spins();
    let d = n + 1;
    let mut a = vec![DMatrix::zeros(d, d); n];
    let mut b = vec![DVector::zeros(d); n];
    for (k, f) in table.flips().iter().enumerate() {
        let x = DVector::from_vec(table.augmented_state(k));
        let i = f.spin;
        b[i] -= f64::from(f.spin_value) * &x;
        a[i] += 4.0 * moments.flip_omega[k] * &x * x.transpose();
    }
    for t in 0..table.n_intervals() {
        let x = DVector::from_vec(table.augmented_state(t));
        let outer = &x * x.transpose();
        for i in 0..n {
            let s = f64::from(table.state(t)[i]);
            b[i] += moments.rho(t, i) * s * &x;
            a[i] += 4.0 * moments.omega(t, i) * &outer;
        }
    }
    Ok(LinearSystem { a, b })
}

/// Solves `(A_i + jitter I + diag(0, l1_diag)) J = b_i` by Cholesky,
/// raising the ridge tenfold up to [`MAX_JITTER`] if the factorization
/// fails.
pub fn solve_row(system: &LinearSystem, i: usize, jitter: f64, l1_diag: Option<&[f64]>) -> Result<DVector<f64>> {
    let a = system.a.get(i).ok_or_else(|| Error::dimension(format!("no system for spin {i}")))?;
    let mut reg = a.clone();
    if let Some(l1) = l1_diag {
        if l1.len() + 1 != reg.nrows() {
            return Err(Error::dimension("l1_diag must have one entry per coupling"));
        }
        for (j, w) in l1.iter().enumerate() {
            reg[(j + 1, j + 1)] += w;
        }
    }
    solve_spd(reg, &system.b[i], jitter)
}

/// Cholesky solve with jitter escalation and one refinement step.
pub(crate) fn solve_spd(mut m: DMatrix<f64>, rhs: &DVector<f64>, jitter: f64) -> Result<DVector<f64>> {
    let d = m.nrows();
    let mut ridge = jitter;
    for k in 0..d {
        m[(k, k)] += ridge;
    }
    loop {
        if let Some(chol) = m.clone().cholesky() {
            let mut sol = chol.solve(rhs);
            let resid = rhs - &m * &sol;
            sol += chol.solve(&resid);
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol);
            }
        }
        let next = if ridge > 0.0 { ridge * 10.0 } else { 1e-10 };
        if next > MAX_JITTER {
            return Err(Error::numerical(format!("Cholesky failed with ridge up to {ridge:e}")));
        }
        for k in 0..d {
            m[(k, k)] += next - ridge;
        }
        ridge = next;
    }
}

/// Smoothed absolute value used by the penalized objective: `|J|` above
/// [`J_FLOOR`], and the quadratic that the floored sparsity weight
/// majorizes below it.
pub fn smoothed_abs(j: f64) -> f64 {
    let a = j.abs();
    if a >= J_FLOOR {
        a
    } else {
        j * j / (2.0 * J_FLOOR) + 0.5 * J_FLOOR
    }
}

pub(crate) fn l1_penalty(model: &IsingModel, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * model.couplings.iter().map(|&j| smoothed_abs(j)).sum::<f64>()
}

/// `(logistic(2u), pg_mean(1, 2u))` from a single exponential.
#[inline]
fn logistic_and_pg(u: f64) -> (f64, f64) {
    let e = (-2.0 * u.abs()).exp();
    let p = if u >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    let a = u.abs();
    let pg = if 2.0 * a < PG_SERIES_CUTOFF { pg_mean(1.0, 2.0 * a) } else { (1.0 - e) / ((1.0 + e) * 4.0 * a) };
    (p, pg)
}

/// Streaming E-step for one row: accumulates `A_i`, `b_i` and the row's
/// log-likelihood at the current parameters.
struct EmRow {
    spin: usize,
    gamma: f64,
    field: LinearTracker,
    acc: GramAccumulator,
    loglik: f64,
    survival: f64,
}

impl IntervalVisitor for EmRow {
    fn interval(&mut self, x: &[f64], duration: f64, ends_with: Option<usize>) {
        let h = self.field.value(x);
        let s = x[self.spin + 1];
        let (p, pg1) = logistic_and_pg(s * h);
        let rho = duration * self.gamma * p;
        let mut w = rho * pg1;
        let mut c = rho * s;
        self.survival += duration * (p - 1.0);
        if ends_with == Some(self.spin) {
            w += pg1;
            c -= s;
            self.loglik -= softplus(2.0 * s * h);
        }
        self.acc.add(w, c);
    }

    fn flip(&mut self, j: usize, x: &[f64]) {
        self.field.flip(j + 1, x[j + 1]);
        self.acc.flip(j + 1);
    }
}

pub(crate) struct RowPass {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub loglik: f64,
}

pub(crate) fn em_row_pass(traj: &SpinTrajectory, i: usize, row: &DVector<f64>, gamma: f64) -> RowPass {
    let x0 = augmented_initial_state(traj);
    let mut v = EmRow {
        spin: i,
        gamma,
        field: LinearTracker::new(row.as_slice()),
        acc: GramAccumulator::new(&x0),
        loglik: 0.0,
        survival: 0.0,
    };
    walk(traj, &mut v);
    let loglik = v.loglik + gamma * v.survival;
    let (g, b) = v.acc.finish();
    RowPass { a: 4.0 * g, b, loglik }
}

/// E-step over all rows. Returns the systems and the log-likelihood at
/// `model`.
pub fn em_estep(traj: &SpinTrajectory, model: &IsingModel) -> Result<(LinearSystem, f64)> {
    if traj.n_spins() != model.n_spins() {
        return Err(Error::dimension("model and trajectory disagree on the number of spins"));
    }
    let passes: Vec<RowPass> =
        (0..traj.n_spins()).into_par_iter().map(|i| em_row_pass(traj, i, &model.row(i), model.gamma)).collect();
    let loglik = passes.iter().map(|p| p.loglik).sum();
    let (a, b) = passes.into_iter().map(|p| (p.a, p.b)).unzip();
    Ok((LinearSystem { a, b }, loglik))
}

/// M-step: solve every row, with sparsity weights from the current
/// couplings when `lambda > 0`.
pub fn em_mstep(system: &LinearSystem, current: &IsingModel, lambda: f64, jitter: f64) -> Result<IsingModel> {
    let n = system.n_spins();
    let rows: Result<Vec<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if lambda > 0.0 {
                let l1: Vec<f64> =
                    (0..n).map(|j| lambda * lambda * gig_beta_mean(current.couplings[(i, j)], lambda)).collect();
                solve_row(system, i, jitter, Some(&l1))
            } else {
                solve_row(system, i, jitter, None)
            }
        })
        .collect();
    IsingModel::from_rows(&rows?, current.gamma)
}

/// Runs EM (or L1-penalized EM when `cfg.lambda > 0`) from `cfg.init`.
///
/// The trace holds the objective at the initial parameters and after every
/// M-step; the returned model is the last one evaluated.
pub fn em_fit(traj: &SpinTrajectory, gamma: f64, cfg: &EmConfig) -> Result<FitReport> {
    cfg.validate()?;
    let n = traj.n_spins();
    let mut model = match &cfg.init {
        EmInit::Zeros => IsingModel::zeros(n, gamma)?,
        EmInit::Given(m) => {
            let mut m = m.clone();
            m.gamma = gamma;
            m
        }
    };
    if model.n_spins() != n {
        return Err(Error::dimension("initial model does not match the trajectory"));
    }
    let mut trace: Vec<EmIteration> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (system, loglik) = em_estep(traj, &model)?;
        let penalized_obj = loglik - l1_penalty(&model, cfg.lambda);
        if !penalized_obj.is_finite() {
            return Err(Error::numerical(format!("objective became non-finite at iteration {iterations}")));
        }
        if let Some(prev) = trace.last() {
            let rel = (penalized_obj - prev.penalized_obj).abs() / penalized_obj.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tol {
                converged = true;
            }
        }
        trace.push(EmIteration { iter: iterations, loglik, penalized_obj });
        if converged || iterations >= cfg.max_iters {
            break;
        }
        model = em_mstep(&system, &model, cfg.lambda, cfg.jitter)?;
        iterations += 1;
    }
    Ok(FitReport { model, trace, iterations, converged })
}
