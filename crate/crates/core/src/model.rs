//! Trajectories, model parameters and the continuous-time likelihood.
//!
//! A trajectory is stored as its initial configuration plus the ordered
//! list of single-spin flips; the fields acting on each spin are piecewise
//! constant between flips, so every time integral reduces to a sum over
//! constant intervals. Interval `n` runs from the `n`-th flip (or 0) to the
//! next one (or `t_end`); flip `k` ends interval `k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{logistic, softplus};
use crate::sweep::{walk, IntervalVisitor, LinearTracker};

/// Spin value, always `-1` or `+1`.
pub type Spin = i8;

/// Offset applied to successive tied event times when ingesting
/// discretized data.
pub const TIE_JITTER: f64 = 1e-9;

/// One flip event: spin `i` changes sign at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flip {
    pub t: f64,
    pub i: usize,
}

/// Piecewise-constant record of `N` spins on `[0, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinTrajectory {
    n_spins: usize,
    t_end: f64,
    initial_state: Vec<Spin>,
    flips: Vec<Flip>,
}

impl SpinTrajectory {
    /// Validates and builds a trajectory. Flip times must be strictly
    /// increasing and lie in the open interval `(0, t_end)`.
    pub fn new(t_end: f64, initial_state: Vec<Spin>, flips: Vec<Flip>) -> Result<Self> {
        let n_spins = initial_state.len();
        if n_spins == 0 {
            return Err(Error::invalid("trajectory needs at least one spin"));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::invalid(format!("t_end must be positive, got {t_end}")));
        }
        if let Some(s) = initial_state.iter().find(|s| **s != 1 && **s != -1) {
            return Err(Error::invalid(format!("spin value {s} is not +-1")));
        }
        let mut prev = 0.0;
        for (k, f) in flips.iter().enumerate() {
            if f.i >= n_spins {
                return Err(Error::invalid(format!("flip {k} refers to spin {} >= {n_spins}", f.i)));
            }
            if !(f.t.is_finite() && f.t > prev && f.t < t_end) {
                return Err(Error::invalid(format!(
                    "flip {k} at t={} is not strictly increasing inside (0, {t_end})",
                    f.t
                )));
            }
            prev = f.t;
        }
        Ok(Self { n_spins, t_end, initial_state, flips })
    }

    /// Like [`SpinTrajectory::new`], but first pushes tied (or reversed by
    /// rounding) event times forward by [`TIE_JITTER`] so that discretized
    /// external data becomes a valid continuous-time record.
    pub fn with_jittered_ties(t_end: f64, initial_state: Vec<Spin>, mut flips: Vec<Flip>) -> Result<Self> {
        flips.sort_by(|a, b| a.t.total_cmp(&b.t));
        let mut prev = 0.0_f64;
        for f in &mut flips {
            if f.t <= prev {
                f.t = prev + TIE_JITTER;
            }
            prev = f.t;
        }
        Self::new(t_end, initial_state, flips)
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn initial_state(&self) -> &[Spin] {
        &self.initial_state
    }

    pub fn flips(&self) -> &[Flip] {
        &self.flips
    }

    /// Number of constant intervals, `|flips| + 1`.
    pub fn n_intervals(&self) -> usize {
        self.flips.len() + 1
    }

    /// Number of flips of each spin.
    pub fn flip_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_spins];
        for f in &self.flips {
            c[f.i] += 1;
        }
        c
    }

    /// Spin configuration at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> Vec<Spin> {
        let mut s = self.initial_state.clone();
        for f in self.flips.iter().take_while(|f| f.t <= t) {
            s[f.i] = -s[f.i];
        }
        s
    }

    /// Relabels spins: spin `i` of `self` becomes spin `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_spins)?;
        let mut init = vec![0; self.n_spins];
        for (i, &p) in perm.iter().enumerate() {
            init[p] = self.initial_state[i];
        }
        let flips = self.flips.iter().map(|f| Flip { t: f.t, i: perm[f.i] }).collect();
        Self::new(self.t_end, init, flips)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::dimension(format!("permutation of length {} for {n} spins", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::invalid("not a permutation"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Couplings `J` (row `i` holds the couplings into spin `i`), external
/// fields `theta` and the update rate `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingModel {
    pub couplings: DMatrix<f64>,
    pub fields: DVector<f64>,
    pub gamma: f64,
}

impl IsingModel {
    pub fn new(couplings: DMatrix<f64>, fields: DVector<f64>, gamma: f64) -> Result<Self> {
        let n = fields.len();
        if couplings.nrows() != n || couplings.ncols() != n {
            return Err(Error::dimension(format!(
                "couplings are {}x{} but there are {n} fields",
                couplings.nrows(),
                couplings.ncols()
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if couplings.iter().chain(fields.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { couplings, fields, gamma })
    }

    /// All-zero parameters.
    pub fn zeros(n: usize, gamma: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(n, n), DVector::zeros(n), gamma)
    }

    pub fn n_spins(&self) -> usize {
        self.fields.len()
    }

    /// Stacked row `(theta_i, J_i1, ..., J_iN)`.
    pub fn row(&self, i: usize) -> DVector<f64> {
        let n = self.n_spins();
        DVector::from_fn(n + 1, |k, _| if k == 0 { self.fields[i] } else { self.couplings[(i, k - 1)] })
    }

    /// Inverse of [`IsingModel::row`] applied to every row.
    pub fn from_rows(rows: &[DVector<f64>], gamma: f64) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n + 1) {
            return Err(Error::dimension("every stacked row must have length N+1"));
        }
        let fields = DVector::from_fn(n, |i, _| rows[i][0]);
        let couplings = DMatrix::from_fn(n, n, |i, j| rows[i][j + 1]);
        Self::new(couplings, fields, gamma)
    }

    /// Total field `theta_i + sum_j J_ij s_j` for every spin.
    pub fn fields_at(&self, state: &[Spin]) -> Vec<f64> {
        let n = self.n_spins();
        (0..n)
            .map(|i| {
                let mut h = self.fields[i];
                for (j, &s) in state.iter().enumerate() {
                    h += self.couplings[(i, j)] * f64::from(s);
                }
                h
            })
            .collect()
    }

    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_spins();
        check_permutation(perm, n)?;
        let mut j = DMatrix::zeros(n, n);
        let mut th = DVector::zeros(n);
        for a in 0..n {
            th[perm[a]] = self.fields[a];
            for b in 0..n {
                j[(perm[a], perm[b])] = self.couplings[(a, b)];
            }
        }
        Self::new(j, th, self.gamma)
    }

    fn check_matches(&self, traj: &SpinTrajectory) -> Result<()> {
        if self.n_spins() != traj.n_spins() {
            return Err(Error::dimension(format!(
                "model has {} spins, trajectory has {}",
                self.n_spins(),
                traj.n_spins()
            )));
        }
        Ok(())
    }
}

/// Probability that a selected spin with value `s` in field `h` flips,
/// `exp(-s h) / (2 cosh h)`, evaluated as `logistic(-2 s h)`.
#[inline]
pub fn flip_probability(s: Spin, h: f64) -> f64 {
    logistic(-2.0 * f64::from(s) * h)
}

/// One flip event as seen from the interval it ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipEvent {
    pub spin: usize,
    /// Field on the flipping spin just before the flip.
    pub field: f64,
    /// Spin value just before the flip.
    pub spin_value: Spin,
}

/// Per-interval durations, configurations and fields of a trajectory
/// under a given model.
#[derive(Clone, Debug)]
pub struct IntervalTable {
    n_spins: usize,
    durations: Vec<f64>,
    states: Vec<Spin>,
    fields: Vec<f64>,
    flips: Vec<FlipEvent>,
}

impl IntervalTable {
    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn n_intervals(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn duration(&self, n: usize) -> f64 {
        self.durations[n]
    }

    pub fn state(&self, n: usize) -> &[Spin] {
        &self.states[n * self.n_spins..(n + 1) * self.n_spins]
    }

    pub fn fields(&self, n: usize) -> &[f64] {
        &self.fields[n * self.n_spins..(n + 1) * self.n_spins]
    }

    /// Flip `k` ends interval `k`.
    pub fn flips(&self) -> &[FlipEvent] {
        &self.flips
    }

    /// Augmented state `(1, s_1, ..., s_N)` of interval `n`.
    pub fn augmented_state(&self, n: usize) -> Vec<f64> {
        std::iter::once(1.0).chain(self.state(n).iter().map(|&s| f64::from(s))).collect()
    }
}

/// Tabulates every constant interval. Fields are updated incrementally:
/// a flip of spin `j` from `s` changes each `H_i` by `-2 J_ij s`.
pub fn build_interval_table(traj: &SpinTrajectory, model: &IsingModel) -> Result<IntervalTable> {
    model.check_matches(traj)?;
    let n = traj.n_spins();
    let n_int = traj.n_intervals();
    let mut durations = Vec::with_capacity(n_int);
    let mut states = Vec::with_capacity(n_int * n);
    let mut fields = Vec::with_capacity(n_int * n);
    let mut flips = Vec::with_capacity(traj.flips().len());

    let mut state = traj.initial_state().to_vec();
    let mut h = model.fields_at(&state);
    let mut t_prev = 0.0;
    for f in traj.flips() {
        durations.push(f.t - t_prev);
        states.extend_from_slice(&state);
        fields.extend_from_slice(&h);
        let s_old = state[f.i];
        flips.push(FlipEvent { spin: f.i, field: h[f.i], spin_value: s_old });
        let delta = -2.0 * f64::from(s_old);
        for (i, hi) in h.iter_mut().enumerate() {
            *hi += delta * model.couplings[(i, f.i)];
        }
        state[f.i] = -s_old;
        t_prev = f.t;
    }
    durations.push(traj.t_end() - t_prev);
    states.extend_from_slice(&state);
    fields.extend_from_slice(&h);

    Ok(IntervalTable { n_spins: n, durations, states, fields, flips })
}

struct LikelihoodRow {
    spin: usize,
    gamma: f64,
    field: LinearTracker,
    flip_terms: f64,
    interval_terms: f64,
}

impl IntervalVisitor for LikelihoodRow {
    fn interval(&mut self, x: &[f64], duration: f64, ends_with: Option<usize>) {
        let h = self.field.value(x);
        let s = x[self.spin + 1];
        self.interval_terms += duration * (logistic(2.0 * s * h) - 1.0);
        if ends_with == Some(self.spin) {
            // -s h - ln(2 cosh h) = -softplus(2 s h)
            self.flip_terms -= softplus(2.0 * s * h);
        }
    }

    fn flip(&mut self, j: usize, x: &[f64]) {
        self.field.flip(j + 1, x[j + 1]);
    }
}

/// Per-spin contributions to the continuous-time log-likelihood.
pub fn log_likelihood_rows(traj: &SpinTrajectory, model: &IsingModel) -> Result<Vec<f64>> {
    model.check_matches(traj)?;
    use rayon::prelude::*;
    let rows: Vec<f64> = (0..traj.n_spins())
        .into_par_iter()
        .map(|i| {
            let mut row = LikelihoodRow {
                spin: i,
                gamma: model.gamma,
                field: LinearTracker::new(model.row(i).as_slice()),
                flip_terms: 0.0,
                interval_terms: 0.0,
            };
            walk(traj, &mut row);
            row.flip_terms + row.gamma * row.interval_terms
        })
        .collect();
    Ok(rows)
}

/// Continuous-time complete-data log-likelihood
///
/// `sum_F [-s H - ln 2cosh H] + gamma sum_i sum_n dt_n [exp(s H)/(2 cosh H) - 1]`
///
/// where flip terms use the configuration just before the flip.
pub fn log_likelihood(traj: &SpinTrajectory, model: &IsingModel) -> Result<f64> {
    Ok(log_likelihood_rows(traj, model)?.iter().sum())
}

/// Log-probability of the trajectory under the time-discretized dynamics
/// on the grid `{0, dt, 2dt, ...}`. A flip at `t` belongs to cell
/// `floor(t / dt)`; within a cell every factor is evaluated on the
/// configuration at the start of the cell.
///
/// Only meaningful up to a model-independent constant relative to
/// [`log_likelihood`]; intended as a test oracle.
pub fn discrete_log_prob(traj: &SpinTrajectory, model: &IsingModel, dt: f64) -> Result<f64> {
    model.check_matches(traj)?;
    let gdt = model.gamma * dt;
    if !(dt > 0.0 && gdt < 1.0) {
        return Err(Error::invalid(format!("need 0 < gamma*dt < 1, got {gdt}")));
    }
    let ratio = traj.t_end() / dt;
    let n_cells = ratio.round();
    if (n_cells - ratio).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::invalid(format!("dt={dt} does not divide t_end={}", traj.t_end())));
    }
    let n_cells = n_cells as u64;
    let cell_of = |t: f64| -> u64 {
        let r = t / dt;
        let nearest = r.round();
        if (r - nearest).abs() < 1e-9 * r.max(1.0) {
            nearest as u64
        } else {
            r.floor() as u64
        }
    };

    let n = traj.n_spins();
    let mut state = traj.initial_state().to_vec();
    let mut total = 0.0;
    let mut cell = 0u64;
    let flips = traj.flips();
    let mut k = 0;
    let mut flipping = vec![false; n];
    while cell < n_cells {
        // Run of cells without flips up to the next flip cell.
        let next = if k < flips.len() { cell_of(flips[k].t).min(n_cells - 1) } else { n_cells };
        let h = model.fields_at(&state);
        if next > cell {
            let quiet: f64 = (0..n).map(|i| (-gdt * flip_probability(state[i], h[i])).ln_1p()).sum();
            total += quiet * (next - cell) as f64;
            cell = next;
        }
        if cell >= n_cells {
            break;
        }
        flipping.iter_mut().for_each(|f| *f = false);
        let mut members = Vec::new();
        while k < flips.len() && cell_of(flips[k].t).min(n_cells - 1) == cell {
            let i = flips[k].i;
            if flipping[i] {
                return Err(Error::invalid(format!(
                    "spin {i} flips twice inside grid cell {cell}; refine dt"
                )));
            }
            flipping[i] = true;
            members.push(i);
            k += 1;
        }
        for i in 0..n {
            let p = flip_probability(state[i], h[i]);
            total += if flipping[i] { (gdt * p).ln() } else { (-gdt * p).ln_1p() };
        }
        for i in members {
            state[i] = -state[i];
        }
        cell += 1;
    }
    Ok(total)
}
