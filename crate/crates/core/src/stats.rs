//! Evaluation: time-averaged moments of trajectories, coupling errors,
//! ROC curves and Pearson correlation.
//!
//! Moments are exact integrals over the constant intervals. Higher-order
//! statistics are central moments `<prod_k (s_k - m_k)>` over distinct
//! index tuples, either all of them or a seeded random subset.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SpinTrajectory;
use crate::sampler::stream_rng;
use crate::sweep::{augmented_initial_state, walk, GramAccumulator, IntervalVisitor};

pub const DEFAULT_SUBSET_BUDGET: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct TupleMoment {
    pub indices: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub t_end: f64,
    pub m: DVector<f64>,
    /// `C_ij = <s_i s_j> - m_i m_j`.
    pub c2: DMatrix<f64>,
    pub c3: Vec<TupleMoment>,
    pub c4: Vec<TupleMoment>,
    pub subset_budget: usize,
    pub subset_seed: u64,
}

struct GramOnly(GramAccumulator);

impl IntervalVisitor for GramOnly {
    fn interval(&mut self, _x: &[f64], duration: f64, _e: Option<usize>) {
        self.0.add(duration, 0.0);
    }
    fn flip(&mut self, j: usize, _x: &[f64]) {
        self.0.flip(j + 1);
    }
}

/// Means and second-order correlations of a trajectory.
pub fn means_and_correlations(traj: &SpinTrajectory) -> (DVector<f64>, DMatrix<f64>) {
    let n = traj.n_spins();
    let t = traj.t_end();
    let mut v = GramOnly(GramAccumulator::new(&augmented_initial_state(traj)));
    walk(traj, &mut v);
    let (g, _) = v.0.finish();
    let m = DVector::from_fn(n, |i, _| g[(0, i + 1)] / t);
    let c2 = DMatrix::from_fn(n, n, |i, j| g[(i + 1, j + 1)] / t - m[i] * m[j]);
    (m, c2)
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, r| acc * (n - r) as u128 / (r as u128 + 1))
}

fn all_tuples(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut p = k;
        while p > 0 && idx[p - 1] == n - k + p - 1 {
            p -= 1;
        }
        if p == 0 {
            return out;
        }
        idx[p - 1] += 1;
        for q in p..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// All increasing `k`-tuples if there are at most `budget` of them,
/// otherwise `budget` distinct random ones.
pub fn choose_tuples(n: usize, k: usize, budget: usize, seed: u64) -> Vec<Vec<usize>> {
    if n_choose_k(n, k) <= budget as u128 {
        return all_tuples(n, k);
    }
    let mut rng = stream_rng(seed, 16 + k as u64);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let mut t = BTreeSet::new();
        while t.len() < k {
            t.insert(rng.random_range(0..n));
        }
        let t: Vec<usize> = t.into_iter().collect();
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

/// Time average of `prod_k (s_k - m_k)` over the tuple, merging the flip
/// lists of its spins.
fn central_moment(traj: &SpinTrajectory, flips_of: &[Vec<f64>], m: &DVector<f64>, tuple: &[usize]) -> f64 {
    let mut s: Vec<f64> = tuple.iter().map(|&i| f64::from(traj.initial_state()[i])).collect();
    let mut pos = vec![0usize; tuple.len()];
    let mut t_prev = 0.0;
    let mut total = 0.0;
    let prod = |s: &[f64]| tuple.iter().zip(s).map(|(&i, v)| v - m[i]).product::<f64>();
    loop {
        let next = (0..tuple.len())
            .filter_map(|k| flips_of[tuple[k]].get(pos[k]).map(|t| (*t, k)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((t, k)) = next else { break };
        total += (t - t_prev) * prod(&s);
        s[k] = -s[k];
        pos[k] += 1;
        t_prev = t;
    }
    total += (traj.t_end() - t_prev) * prod(&s);
    total / traj.t_end()
}

pub fn trajectory_stats(traj: &SpinTrajectory, order: usize, subset_budget: usize, seed: u64) -> Result<StatsReport> {
    if !(2..=4).contains(&order) {
        return Err(Error::invalid(format!("order must be 2, 3 or 4, got {order}")));
    }
    let (m, c2) = means_and_correlations(traj);
    let n = traj.n_spins();
    let mut flips_of = vec![Vec::new(); n];
    for f in traj.flips() {
        flips_of[f.i].push(f.t);
    }
    let higher = |k: usize| -> Vec<TupleMoment> {
        if order < k {
            return Vec::new();
        }
        choose_tuples(n, k, subset_budget, seed)
            .into_par_iter()
            .map(|indices| {
                let value = central_moment(traj, &flips_of, &m, &indices);
                TupleMoment { indices, value }
            })
            .collect()
    };
    let c3 = higher(3);
    let c4 = higher(4);
    Ok(StatsReport { t_end: traj.t_end(), m, c2, c3, c4, subset_budget, subset_seed: seed })
}

/// Upper off-diagonal entries `i < j`, row by row.
pub fn upper_offdiag(c: &DMatrix<f64>) -> Vec<f64> {
    let n = c.nrows();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect()
}

/// Mean squared difference over all entries.
pub fn mse(j_true: &DMatrix<f64>, j_est: &DMatrix<f64>) -> Result<f64> {
    if j_true.shape() != j_est.shape() || j_true.is_empty() {
        return Err(Error::dimension(format!("shapes {:?} and {:?} differ", j_true.shape(), j_est.shape())));
    }
    Ok((j_true - j_est).iter().map(|d| d * d).sum::<f64>() / j_true.len() as f64)
}

/// Mean squared difference over couplings and fields together.
pub fn mse_with_fields(
    j_true: &DMatrix<f64>,
    theta_true: &DVector<f64>,
    j_est: &DMatrix<f64>,
    theta_est: &DVector<f64>,
) -> Result<f64> {
    let sj = mse(j_true, j_est)? * j_true.len() as f64;
    if theta_true.len() != theta_est.len() || theta_true.len() != j_true.nrows() {
        return Err(Error::dimension("field vectors do not match the couplings"));
    }
    let st: f64 = (theta_true - theta_est).iter().map(|d| d * d).sum();
    Ok((sj + st) / (j_true.len() + theta_true.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Entries with score `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Exact ROC curve with one point per distinct score plus `+inf`.
pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<RocCurve> {
    if truth.len() != scores.len() {
        return Err(Error::dimension("truth and scores differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    let n_pos = truth.iter().filter(|t| **t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative entries"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let z = scores[order[k]];
        while k < order.len() && scores[order[k]] == z {
            if truth[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint { threshold: z, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 };
        auc += (p.fpr - prev.fpr) * 0.5 * (p.tpr + prev.tpr);
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// ROC for detecting nonzero couplings of `j_true` from `scores`.
pub fn coupling_roc(j_true: &DMatrix<f64>, scores: &DMatrix<f64>, exclude_diagonal: bool) -> Result<RocCurve> {
    if j_true.shape() != scores.shape() {
        return Err(Error::dimension("truth and score matrices differ in shape"));
    }
    let (mut t, mut s) = (Vec::new(), Vec::new());
    for i in 0..j_true.nrows() {
        for j in 0..j_true.ncols() {
            if exclude_diagonal && i == j {
                continue;
            }
            t.push(j_true[(i, j)] != 0.0);
            s.push(scores[(i, j)]);
        }
    }
    roc_auc(&t, &s)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dimension("pearson needs two vectors of equal length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson is undefined for a constant vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
