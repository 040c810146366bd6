//! Conditional means of the auxiliary variables.
//!
//! Three latent families make the likelihood quadratic in the couplings:
//! Polya-Gamma variables for the `1/cosh` factors, Poisson counts for the
//! survival integral, and generalized-inverse-Gaussian scales for the
//! Laplace prior. Only their first moments are ever needed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{IntervalTable, IsingModel};
use crate::numerics::{ln_2cosh, logistic};
use crate::vb::RowPosteriorSet;

/// Below this `|c|` the Polya-Gamma mean switches to its Taylor series.
pub const PG_SERIES_CUTOFF: f64 = 1e-4;

/// Couplings smaller than this in magnitude are treated as this large
/// when computing the sparsity weight, capping it at `1/(lambda j_floor)`.
pub const J_FLOOR: f64 = 1e-8;

/// Mean of a tilted Polya-Gamma variable `PG(b, c)`:
/// `b / (2c) * tanh(c / 2)`, and `b (1/4 - c^2/48)` near `c = 0`.
#[inline]
pub fn pg_mean(b: f64, c: f64) -> f64 {
    if c.abs() < PG_SERIES_CUTOFF {
        b * (0.25 - c * c / 48.0)
    } else {
        b / (2.0 * c) * (0.5 * c).tanh()
    }
}

/// Conditional Poisson mean of an interval count,
/// `duration * gamma * exp(s H) / (2 cosh H)`.
#[inline]
pub fn poisson_mean(duration: f64, gamma: f64, s: f64, h: f64) -> f64 {
    duration * gamma * logistic(2.0 * s * h)
}

/// Mean of the GIG mixing scale of a Laplace prior, `1 / (|J| lambda)`,
/// with `|J|` floored at [`J_FLOOR`].
#[inline]
pub fn gig_beta_mean(j: f64, lambda: f64) -> f64 {
    1.0 / (lambda * j.abs().max(J_FLOOR))
}

/// Expected auxiliary variables for one trajectory.
///
/// Interval arrays are row-major `n_intervals x n_spins`; flip arrays are
/// indexed like the table's flips. The `*_tilt` arrays hold the effective
/// field magnitude of each Polya-Gamma tilt (`|H|` for EM, `sqrt<H^2>` for
/// variational updates) and `interval_field` the mean field used for the
/// Poisson rates; the free energy needs them to evaluate a stale factor.
#[derive(Clone, Debug)]
pub struct AugmentedMoments {
    pub n_spins: usize,
    pub flip_omega: Vec<f64>,
    pub flip_tilt: Vec<f64>,
    pub interval_rho: Vec<f64>,
    pub interval_omega: Vec<f64>,
    pub interval_tilt: Vec<f64>,
    pub interval_field: Vec<f64>,
    pub beta: Option<DMatrix<f64>>,
}

impl AugmentedMoments {
    /// All-zero moments, i.e. no data.
    pub fn zeros(n_spins: usize, n_intervals: usize, n_flips: usize) -> Self {
        Self {
            n_spins,
            flip_omega: vec![0.0; n_flips],
            flip_tilt: vec![0.0; n_flips],
            interval_rho: vec![0.0; n_intervals * n_spins],
            interval_omega: vec![0.0; n_intervals * n_spins],
            interval_tilt: vec![0.0; n_intervals * n_spins],
            interval_field: vec![0.0; n_intervals * n_spins],
            beta: None,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.interval_rho.len() / self.n_spins
    }

    pub fn rho(&self, n: usize, i: usize) -> f64 {
        self.interval_rho[n * self.n_spins + i]
    }

    pub fn omega(&self, n: usize, i: usize) -> f64 {
        self.interval_omega[n * self.n_spins + i]
    }

    pub(crate) fn check_matches(&self, table: &IntervalTable) -> Result<()> {
        if self.n_spins != table.n_spins()
            || self.n_intervals() != table.n_intervals()
            || self.flip_omega.len() != table.flips().len()
        {
            return Err(Error::dimension("moments were computed for a different interval table"));
        }
        Ok(())
    }
}

/// E-step moments at a point estimate of the parameters.
pub fn compute_em_moments(table: &IntervalTable, model: &IsingModel) -> Result<AugmentedMoments> {
    if table.n_spins() != model.n_spins() {
        return Err(Error::dimension("table and model disagree on the number of spins"));
    }
    let n = table.n_spins();
    let mut m = AugmentedMoments::zeros(n, table.n_intervals(), table.flips().len());
    for (k, f) in table.flips().iter().enumerate() {
        m.flip_omega[k] = pg_mean(1.0, 2.0 * f.field);
        m.flip_tilt[k] = f.field.abs();
    }
    for t in 0..table.n_intervals() {
        let dur = table.duration(t);
        for i in 0..n {
            let h = table.fields(t)[i];
            let s = f64::from(table.state(t)[i]);
            let rho = poisson_mean(dur, model.gamma, s, h);
            let idx = t * n + i;
            m.interval_rho[idx] = rho;
            m.interval_omega[idx] = pg_mean(rho, 2.0 * h);
            m.interval_tilt[idx] = h.abs();
            m.interval_field[idx] = h;
        }
    }
    Ok(m)
}

/// Variational moments: every field enters through its posterior mean
/// `<H> = mu_i . x` and second moment `<H^2> = <H>^2 + x^T Sigma_i x`.
/// The sparsity weights `beta` are left unset; see
/// [`crate::vb::vb_update_q2`].
pub fn compute_vb_moments(table: &IntervalTable, post: &RowPosteriorSet, gamma: f64) -> Result<AugmentedMoments> {
    let n = table.n_spins();
    if post.n_spins() != n {
        return Err(Error::dimension("posterior and table disagree on the number of spins"));
    }
    post.validate()?;
    let mut m = AugmentedMoments::zeros(n, table.n_intervals(), table.flips().len());
    let field_moments = |t: usize, i: usize| {
        let x = nalgebra::DVector::from_vec(table.augmented_state(t));
        let row = &post.rows[i];
        let mean = row.mean.dot(&x);
        let var = (x.transpose() * &row.cov * &x)[0];
        (mean, (mean * mean + var.max(0.0)).sqrt())
    };
    for (k, f) in table.flips().iter().enumerate() {
        let (_, tilt) = field_moments(k, f.spin);
        m.flip_omega[k] = pg_mean(1.0, 2.0 * tilt);
        m.flip_tilt[k] = tilt;
    }
    for t in 0..table.n_intervals() {
        let dur = table.duration(t);
        for i in 0..n {
            let (mean, tilt) = field_moments(t, i);
            let s = f64::from(table.state(t)[i]);
            let rho = dur * gamma * (s * mean - ln_2cosh(tilt)).exp();
            let idx = t * n + i;
            m.interval_rho[idx] = rho;
            m.interval_omega[idx] = pg_mean(rho, 2.0 * tilt);
            m.interval_tilt[idx] = tilt;
            m.interval_field[idx] = mean;
        }
    }
    Ok(m)
}
