//! Variational Bayes with a factorized posterior `q1(J) q2(omega, rho, beta)`.
//!
//! Couplings carry a Laplace prior of scale `lambda`, fields a Gaussian
//! prior `N(mu_theta, lambda_theta^-2)`. Given `q2`, each row of `q1` is
//! Gaussian with precision `A_i + diag(lambda_theta^2, lambda^2 <beta_i.>)`
//! where `A_i` is the M-step matrix (it already carries the factor 4).
//! Given `q1`, the latent means follow from `<H>` and `<H^2>`.
//!
//! The free energy is tracked with all constants kept, so `-F` is a proper
//! lower bound on the log evidence of the continuous-time likelihood. With
//! `q2` optimal for `q1` it reads, per row,
//!
//! ```text
//! sum_F [ln 2cosh h + s <H>] + sum_n gamma dt_n (1 - exp(s <H>) / 2cosh h)
//!   + sum_j [lambda sqrt<J_ij^2> - ln(lambda/2)]
//!   - <ln N(theta_i | mu_theta, lambda_theta^-2)> - entropy(q1_i)
//! ```
//!
//! with `h = sqrt<H^2>`.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::em::{assemble_system, solve_spd, EmConfig, EmInit, LinearSystem, MAX_JITTER};
use crate::error::{Error, Result};
use crate::model::{IntervalTable, SpinTrajectory};
use crate::moments::{compute_vb_moments, gig_beta_mean, pg_mean, AugmentedMoments};
use crate::numerics::ln_2cosh;
use crate::sweep::{augmented_initial_state, walk, GramAccumulator, IntervalVisitor, LinearTracker, QuadTracker};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    /// Laplace scale of the coupling prior.
    pub lambda: f64,
    pub mu_theta: f64,
    /// Square root of the field prior precision.
    pub lambda_theta: f64,
}

impl PriorConfig {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, mu_theta: 0.0, lambda_theta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("prior lambda must be positive"));
        }
        if !(self.lambda_theta > 0.0 && self.lambda_theta.is_finite()) {
            return Err(Error::invalid("lambda_theta must be positive"));
        }
        if !self.mu_theta.is_finite() {
            return Err(Error::invalid("mu_theta must be finite"));
        }
        Ok(())
    }
}

/// Gaussian posterior over one stacked row `(theta_i, J_i1, ..., J_iN)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowPosteriorSet {
    pub rows: Vec<RowPosterior>,
}

impl RowPosteriorSet {
    pub fn n_spins(&self) -> usize {
        self.rows.len()
    }

    /// Checks shapes, finiteness, symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_spins();
        for (i, r) in self.rows.iter().enumerate() {
            if r.mean.len() != n + 1 || r.cov.nrows() != n + 1 || r.cov.ncols() != n + 1 {
                return Err(Error::dimension(format!("posterior row {i} has the wrong shape")));
            }
            if r.mean.iter().chain(r.cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("posterior row {i} is not finite")));
            }
            let scale = r.cov.abs().max().max(f64::MIN_POSITIVE);
            if (&r.cov - r.cov.transpose()).abs().max() > 1e-9 * scale {
                return Err(Error::invalid(format!("covariance {i} is not symmetric")));
            }
            if r.cov.clone().cholesky().is_none() {
                return Err(Error::numerical(format!("covariance {i} is not positive definite")));
            }
        }
        Ok(())
    }

    /// Posterior mean couplings `<J_ij>`.
    pub fn coupling_means(&self) -> DMatrix<f64> {
        let n = self.n_spins();
        DMatrix::from_fn(n, n, |i, j| self.rows[i].mean[j + 1])
    }

    pub fn field_means(&self) -> DVector<f64> {
        DVector::from_fn(self.n_spins(), |i, _| self.rows[i].mean[0])
    }

    /// Posterior variances `(Sigma_i)_jj` of the couplings.
    pub fn coupling_variances(&self) -> DMatrix<f64> {
        let n = self.n_spins();
        DMatrix::from_fn(n, n, |i, j| self.rows[i].cov[(j + 1, j + 1)])
    }

    /// `<J_ij^2> = mu_ij^2 + (Sigma_i)_jj`.
    pub fn coupling_second_moments(&self) -> DMatrix<f64> {
        let n = self.n_spins();
        DMatrix::from_fn(n, n, |i, j| {
            let r = &self.rows[i];
            r.mean[j + 1].powi(2) + r.cov[(j + 1, j + 1)]
        })
    }

    /// Posterior z-scores `|<J_ij>| / sqrt((Sigma_i)_jj)`, used to rank
    /// couplings as present or absent.
    pub fn coupling_scores(&self) -> DMatrix<f64> {
        let mu = self.coupling_means();
        let var = self.coupling_variances();
        mu.zip_map(&var, |m, v| m.abs() / v.sqrt())
    }

    /// Posterior-mean model.
    pub fn mean_model(&self, gamma: f64) -> Result<crate::model::IsingModel> {
        crate::model::IsingModel::new(self.coupling_means(), self.field_means(), gamma)
    }
}

/// Sparsity weights `<beta_ij>` under the GIG factor implied by `q1`.
pub fn beta_means(post: &RowPosteriorSet, lambda: f64) -> DMatrix<f64> {
    post.coupling_second_moments().map(|j2| gig_beta_mean(j2.sqrt(), lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HalfStep {
    /// `q1` was just updated with `q2` held fixed.
    Q1,
    /// `q2` was just updated; the value is the collapsed free energy.
    Q2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergyStep {
    pub iter: usize,
    pub step: HalfStep,
    pub free_energy: f64,
}

#[derive(Clone, Debug)]
pub struct VbReport {
    pub posterior: RowPosteriorSet,
    /// Free energy after every half-step; iteration 0 is the initial `q2`.
    pub trace: Vec<FreeEnergyStep>,
    pub iterations: usize,
    pub converged: bool,
    pub free_energy: f64,
}

fn row_posterior(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    beta_row: &[f64],
    prior: &PriorConfig,
    jitter: f64,
) -> Result<RowPosterior> {
    let d = a.nrows();
    let mut prec = a.clone();
    let lt2 = prior.lambda_theta * prior.lambda_theta;
    prec[(0, 0)] += lt2;
    for (j, beta) in beta_row.iter().enumerate() {
        prec[(j + 1, j + 1)] += prior.lambda * prior.lambda * beta;
    }
    let mut rhs = b.clone();
    rhs[0] += lt2 * prior.mu_theta;
    let mean = solve_spd(prec.clone(), &rhs, 0.0)?;
    let mut ridge = 0.0;
    let chol = loop {
        let mut p = prec.clone();
        for k in 0..d {
            p[(k, k)] += ridge;
        }
        if let Some(c) = p.cholesky() {
            break c;
        }
        ridge = if ridge == 0.0 { jitter.max(1e-10) } else { ridge * 10.0 };
        if ridge > MAX_JITTER {
            return Err(Error::numerical("posterior precision is not positive definite"));
        }
    };
    let cov = chol.inverse();
    let cov = 0.5 * (&cov + cov.transpose());
    Ok(RowPosterior { mean, cov })
}

/// `q1` from assembled systems and sparsity weights.
pub fn posterior_from_system(
    system: &LinearSystem,
    beta: &DMatrix<f64>,
    prior: &PriorConfig,
    jitter: f64,
) -> Result<RowPosteriorSet> {
    let n = system.n_spins();
    let rows: Result<Vec<RowPosterior>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let beta_row: Vec<f64> = (0..n).map(|j| beta[(i, j)]).collect();
            row_posterior(&system.a[i], &system.b[i], &beta_row, prior, jitter)
        })
        .collect();
    Ok(RowPosteriorSet { rows: rows? })
}

/// Optimal `q1` given latent moments: `Sigma_i = (A_i + S_i^-1)^-1` and
/// `mu_i = Sigma_i (b_i + S_i^-1 mu0)` with the prior precision
/// `S_i^-1 = diag(lambda_theta^2, lambda^2 <beta_i1>, ...)`.
pub fn vb_update_q1(table: &IntervalTable, moments: &AugmentedMoments, prior: &PriorConfig) -> Result<RowPosteriorSet> {
    prior.validate()?;
    let beta = moments
        .beta
        .as_ref()
        .ok_or_else(|| Error::invalid("q1 update needs sparsity weights in the moments"))?;
    let system = assemble_system(table, moments)?;
    posterior_from_system(&system, beta, prior, 1e-10)
}

/// Optimal `q2` given `q1`, tabulated. `table` fixes the interval
/// structure; its stored fields are not used.
pub fn vb_update_q2(
    table: &IntervalTable,
    post: &RowPosteriorSet,
    prior: &PriorConfig,
    gamma: f64,
) -> Result<AugmentedMoments> {
    prior.validate()?;
    let mut m = compute_vb_moments(table, post, gamma)?;
    m.beta = Some(beta_means(post, prior.lambda));
    Ok(m)
}

/// Coupling prior contribution of one weight: `E_q[ln q(beta) - ln p(J, beta)]`
/// for `q(beta) = GIG(a, 1, -1/2)` with `a = 1 / beta_mean^2`.
fn coupling_term(beta_mean: f64, second_moment: f64, lambda: f64) -> f64 {
    let sqrt_a = 1.0 / beta_mean;
    let a = sqrt_a * sqrt_a;
    sqrt_a - lambda.ln() + 2f64.ln() + 0.5 * beta_mean * (lambda * lambda * second_moment - a)
}

fn field_prior_term(row: &RowPosterior, prior: &PriorConfig) -> f64 {
    let lt2 = prior.lambda_theta * prior.lambda_theta;
    0.5 * (2.0 * PI / lt2).ln() + 0.5 * lt2 * ((row.mean[0] - prior.mu_theta).powi(2) + row.cov[(0, 0)])
}

fn neg_entropy(row: &RowPosterior) -> Result<f64> {
    let d = row.cov.nrows() as f64;
    let chol = row.cov.clone().cholesky().ok_or_else(|| Error::numerical("covariance is not positive definite"))?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d * (2.0 * PI * E).ln() + ln_det))
}

/// Prior and entropy terms of one row, with sparsity weights `beta_row`.
fn row_prior_terms(row: &RowPosterior, beta_row: &[f64], prior: &PriorConfig) -> Result<f64> {
    let mut total = field_prior_term(row, prior) + neg_entropy(row)?;
    for (j, beta) in beta_row.iter().enumerate() {
        let j2 = row.mean[j + 1].powi(2) + row.cov[(j + 1, j + 1)];
        total += coupling_term(*beta, j2, prior.lambda);
    }
    Ok(total)
}

/// Free energy of `(q1 = post, q2)` for a tabulated, possibly stale, `q2`.
/// The tilts, fields and Poisson means stored in `moments` define `q2`.
pub fn free_energy_at(
    table: &IntervalTable,
    post: &RowPosteriorSet,
    moments: &AugmentedMoments,
    prior: &PriorConfig,
    gamma: f64,
) -> Result<f64> {
    prior.validate()?;
    post.validate()?;
    moments.check_matches(table)?;
    let n = table.n_spins();
    let beta = moments.beta.as_ref().ok_or_else(|| Error::invalid("free energy needs sparsity weights"))?;
    let fm = |t: usize, i: usize| {
        let x = DVector::from_vec(table.augmented_state(t));
        let r = &post.rows[i];
        let m = r.mean.dot(&x);
        let q = (x.transpose() * &r.cov * &x)[0];
        (m, m * m + q)
    };
    let mut total = 0.0;
    for (k, f) in table.flips().iter().enumerate() {
        let (m, h2) = fm(k, f.spin);
        let s = f64::from(f.spin_value);
        let tilt = moments.flip_tilt[k];
        total += ln_2cosh(tilt) + s * m + 2.0 * pg_mean(1.0, 2.0 * tilt) * (h2 - tilt * tilt);
    }
    for t in 0..table.n_intervals() {
        let zeta = gamma * table.duration(t);
        for i in 0..n {
            let (m, h2) = fm(t, i);
            let s = f64::from(table.state(t)[i]);
            let idx = t * n + i;
            let kappa = moments.interval_rho[idx];
            let tilt = moments.interval_tilt[idx];
            let m_old = moments.interval_field[idx];
            let w = pg_mean(1.0, 2.0 * tilt);
            total += zeta - kappa + kappa * (s * (m_old - m) + 2.0 * w * (h2 - tilt * tilt));
        }
    }
    for (i, row) in post.rows.iter().enumerate() {
        let beta_row: Vec<f64> = (0..n).map(|j| beta[(i, j)]).collect();
        total += row_prior_terms(row, &beta_row, prior)?;
    }
    if !total.is_finite() {
        return Err(Error::numerical("free energy is not finite"));
    }
    Ok(total)
}

/// Streaming pass for one row. Evaluates the data part of the collapsed
/// free energy at `new`, optionally the half-step value against the `q2`
/// implied by `old`, and accumulates the system for the next `q1` update.
struct VbRow {
    spin: usize,
    gamma: f64,
    mean: LinearTracker,
    quad: QuadTracker,
    old: Option<(LinearTracker, QuadTracker)>,
    acc: GramAccumulator,
    collapsed: f64,
    half: f64,
}

impl IntervalVisitor for VbRow {
    fn interval(&mut self, x: &[f64], duration: f64, ends_with: Option<usize>) {
        let s = x[self.spin + 1];
        let m = self.mean.value(x);
        let h2 = m * m + self.quad.value(x).max(0.0);
        let h = h2.sqrt();
        let zeta = duration * self.gamma;
        let lc = ln_2cosh(h);
        let u = (s * m - lc).exp();
        let rho = zeta * u;
        let mut w = pg_mean(rho, 2.0 * h);
        let mut c = rho * s;
        self.collapsed += zeta * (1.0 - u);
        let flips_here = ends_with == Some(self.spin);
        if flips_here {
            w += pg_mean(1.0, 2.0 * h);
            c -= s;
            self.collapsed += lc + s * m;
        }
        if let Some((om, oq)) = self.old.as_mut() {
            let m_old = om.value(x);
            let h2_old = m_old * m_old + oq.value(x).max(0.0);
            let h_old = h2_old.sqrt();
            let lc_old = ln_2cosh(h_old);
            let kappa = zeta * (s * m_old - lc_old).exp();
            let w_old = pg_mean(1.0, 2.0 * h_old);
            self.half += zeta - kappa + kappa * (s * (m_old - m) + 2.0 * w_old * (h2 - h2_old));
            if flips_here {
                self.half += lc_old + s * m + 2.0 * w_old * (h2 - h2_old);
            }
        }
        self.acc.add(w, c);
    }

    fn flip(&mut self, j: usize, x: &[f64]) {
        let a = j + 1;
        self.mean.flip(a, x[a]);
        self.quad.flip(a, x[a]);
        if let Some((om, oq)) = self.old.as_mut() {
            om.flip(a, x[a]);
            oq.flip(a, x[a]);
        }
        self.acc.flip(a);
    }
}

pub(crate) struct VbPass {
    pub system: LinearSystem,
    pub collapsed: f64,
    pub half: Option<f64>,
}

pub(crate) fn vb_pass(
    traj: &SpinTrajectory,
    new: &RowPosteriorSet,
    old: Option<&RowPosteriorSet>,
    prior: &PriorConfig,
    gamma: f64,
) -> Result<VbPass> {
    let n = traj.n_spins();
    if new.n_spins() != n || old.is_some_and(|o| o.n_spins() != n) {
        return Err(Error::dimension("posterior and trajectory disagree on the number of spins"));
    }
    let beta_new = beta_means(new, prior.lambda);
    let beta_old = old.map(|o| beta_means(o, prior.lambda));
    let x0 = augmented_initial_state(traj);
    let rows: Result<Vec<(DMatrix<f64>, DVector<f64>, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = &new.rows[i];
            let mut v = VbRow {
                spin: i,
                gamma,
                mean: LinearTracker::new(r.mean.as_slice()),
                quad: QuadTracker::new(&r.cov),
                old: old.map(|o| (LinearTracker::new(o.rows[i].mean.as_slice()), QuadTracker::new(&o.rows[i].cov))),
                acc: GramAccumulator::new(&x0),
                collapsed: 0.0,
                half: 0.0,
            };
            walk(traj, &mut v);
            let bn: Vec<f64> = (0..n).map(|j| beta_new[(i, j)]).collect();
            let prior_new = row_prior_terms(r, &bn, prior)?;
            let collapsed = v.collapsed + prior_new;
            let half = match &beta_old {
                Some(bo) => {
                    let bo: Vec<f64> = (0..n).map(|j| bo[(i, j)]).collect();
                    v.half + row_prior_terms(r, &bo, prior)?
                }
                None => f64::NAN,
            };
            let (g, b) = v.acc.finish();
            Ok((4.0 * g, b, collapsed, half))
        })
        .collect();
    let rows = rows?;
    let collapsed: f64 = rows.iter().map(|r| r.2).sum();
    let half = old.map(|_| rows.iter().map(|r| r.3).sum());
    if !collapsed.is_finite() || half.is_some_and(|h: f64| !h.is_finite()) {
        return Err(Error::numerical("free energy is not finite"));
    }
    let (a, b) = rows.into_iter().map(|r| (r.0, r.1)).unzip();
    Ok(VbPass { system: LinearSystem { a, b }, collapsed, half })
}

/// Free energy with `q2` at its optimum for `post`.
pub fn free_energy(traj: &SpinTrajectory, post: &RowPosteriorSet, prior: &PriorConfig, gamma: f64) -> Result<f64> {
    prior.validate()?;
    post.validate()?;
    Ok(vb_pass(traj, post, None, prior, gamma)?.collapsed)
}

/// Starting point of the variational iteration: zero means and a diagonal
/// covariance at the prior scale, capped at `1/(N+1)` so that the initial
/// `<H^2>` stays of order one.
pub fn initial_posterior(n: usize, prior: &PriorConfig, init: &EmInit) -> RowPosteriorSet {
    let cap = 1.0 / (n as f64 + 1.0);
    let theta_var = (1.0 / (prior.lambda_theta * prior.lambda_theta)).min(cap);
    let j_var = (2.0 / (prior.lambda * prior.lambda)).min(cap);
    let rows = (0..n)
        .map(|i| {
            let mean = match init {
                EmInit::Zeros => DVector::zeros(n + 1),
                EmInit::Given(m) => m.row(i),
            };
            let cov = DMatrix::from_fn(n + 1, n + 1, |a, b| match (a == b, a) {
                (false, _) => 0.0,
                (true, 0) => theta_var,
                (true, _) => j_var,
            });
            RowPosterior { mean, cov }
        })
        .collect();
    RowPosteriorSet { rows }
}

/// Alternates `q2` and `q1` updates until the relative change of the
/// free energy falls below `cfg.tol`. `cfg.lambda` and `cfg.jitter` of
/// the EM configuration are ignored in favor of `prior`; `cfg.init`
/// seeds the posterior means.
pub fn vb_fit(traj: &SpinTrajectory, gamma: f64, prior: &PriorConfig, cfg: &EmConfig) -> Result<VbReport> {
    vb_fit_from(traj, gamma, prior, cfg, initial_posterior(traj.n_spins(), prior, &cfg.init))
}

/// [`vb_fit`] from an explicit starting posterior.
pub fn vb_fit_from(
    traj: &SpinTrajectory,
    gamma: f64,
    prior: &PriorConfig,
    cfg: &EmConfig,
    start: RowPosteriorSet,
) -> Result<VbReport> {
    prior.validate()?;
    if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(Error::invalid("max_iters must be >= 1 and tol > 0"));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    start.validate()?;
    let mut post = start;
    let mut pass = vb_pass(traj, &post, None, prior, gamma)?;
    let mut trace = vec![FreeEnergyStep { iter: 0, step: HalfStep::Q2, free_energy: pass.collapsed }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let beta = beta_means(&post, prior.lambda);
        let next = posterior_from_system(&pass.system, &beta, prior, cfg.jitter)?;
        let next_pass = vb_pass(traj, &next, Some(&post), prior, gamma)?;
        iterations += 1;
        let prev = pass.collapsed;
        trace.push(FreeEnergyStep {
            iter: iterations,
            step: HalfStep::Q1,
            free_energy: next_pass.half.expect("half-step value"),
        });
        trace.push(FreeEnergyStep { iter: iterations, step: HalfStep::Q2, free_energy: next_pass.collapsed });
        post = next;
        pass = next_pass;
        if (pass.collapsed - prev).abs() < cfg.tol * pass.collapsed.abs() {
            converged = true;
            break;
        }
    }
    Ok(VbReport { posterior: post, trace, iterations, converged, free_energy: pass.collapsed })
}

/// One [`vb_fit`] per `lambda`, all other prior settings taken from `base`.
pub fn sweep_lambda(
    traj: &SpinTrajectory,
    gamma: f64,
    lambdas: &[f64],
    base: &PriorConfig,
    cfg: &EmConfig,
) -> Result<Vec<(f64, VbReport)>> {
    lambdas
        .iter()
        .map(|&lambda| Ok((lambda, vb_fit(traj, gamma, &PriorConfig { lambda, ..*base }, cfg)?)))
        .collect()
}

/// [`sweep_lambda`] where each fit starts from the previous grid point's
/// posterior. Much cheaper on slowly converging data; the grid should be
/// ordered so neighbours are close.
pub fn sweep_lambda_warm(
    traj: &SpinTrajectory,
    gamma: f64,
    lambdas: &[f64],
    base: &PriorConfig,
    cfg: &EmConfig,
) -> Result<Vec<(f64, VbReport)>> {
    let mut out: Vec<(f64, VbReport)> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let prior = PriorConfig { lambda, ..*base };
        let rep = match out.last() {
            Some((_, prev)) => vb_fit_from(traj, gamma, &prior, cfg, prev.posterior.clone())?,
            None => vb_fit(traj, gamma, &prior, cfg)?,
        };
        out.push((lambda, rep));
    }
    Ok(out)
}

/// Entry of `sweep` with the smallest free energy.
pub fn best_lambda(sweep: &[(f64, VbReport)]) -> Option<&(f64, VbReport)> {
    sweep.iter().min_by(|a, b| a.1.free_energy.total_cmp(&b.1.free_energy))
}
