//! Streaming passes over the constant intervals of a trajectory.
//!
//! The likelihood factorizes over rows `i`, so every fitter works row by
//! row: a visitor walks the intervals once, tracking the augmented state
//! `x = (1, s_1, ..., s_N)` and whatever per-row quantities it needs.
//! Linear and quadratic forms in `x` are updated in O(1) and O(N) per flip
//! and resynchronized every [`RESYNC_EVERY`] flips to bound round-off
//! drift. Weighted Gram matrices `sum_n w_n x_n x_n^T` are accumulated
//! through prefix sums: the product `x_a x_b` only changes when spin `a`
//! or `b` flips, so each entry is a sum over O(flips of a or b) segments.

use nalgebra::{DMatrix, DVector};

use crate::model::SpinTrajectory;

pub(crate) const RESYNC_EVERY: usize = 64;

pub(crate) trait IntervalVisitor {
    /// Called once per constant interval with the augmented state. For all
    /// but the last interval `ends_with` names the spin that flips at its
    /// right end.
    fn interval(&mut self, x: &[f64], duration: f64, ends_with: Option<usize>);

    /// Called after `interval` with the pre-flip state, just before
    /// `x[j + 1]` changes sign.
    fn flip(&mut self, j: usize, x: &[f64]);
}

pub(crate) fn augmented_initial_state(traj: &SpinTrajectory) -> Vec<f64> {
    std::iter::once(1.0).chain(traj.initial_state().iter().map(|&s| f64::from(s))).collect()
}

pub(crate) fn walk<V: IntervalVisitor>(traj: &SpinTrajectory, visitor: &mut V) {
    let mut x = augmented_initial_state(traj);
    let mut t_prev = 0.0;
    for f in traj.flips() {
        visitor.interval(&x, f.t - t_prev, Some(f.i));
        visitor.flip(f.i, &x);
        x[f.i + 1] = -x[f.i + 1];
        t_prev = f.t;
    }
    visitor.interval(&x, traj.t_end() - t_prev, None);
}

/// Tracks `c . x`.
pub(crate) struct LinearTracker {
    coef: Vec<f64>,
    value: f64,
    stale: usize,
    synced: bool,
}

impl LinearTracker {
    pub(crate) fn new(coef: &[f64]) -> Self {
        Self { coef: coef.to_vec(), value: 0.0, stale: 0, synced: false }
    }

    pub(crate) fn value(&mut self, x: &[f64]) -> f64 {
        if !self.synced || self.stale >= RESYNC_EVERY {
            self.value = self.coef.iter().zip(x).map(|(c, v)| c * v).sum();
            self.stale = 0;
            self.synced = true;
        }
        self.value
    }

    /// Entry `a` of `x` is about to change from `x_a`.
    pub(crate) fn flip(&mut self, a: usize, x_a: f64) {
        self.value -= 2.0 * self.coef[a] * x_a;
        self.stale += 1;
    }
}

/// Tracks `x^T S x` for a symmetric `S` through `v = S x`.
pub(crate) struct QuadTracker {
    dim: usize,
    s: Vec<f64>,
    v: Vec<f64>,
    value: f64,
    stale: usize,
    synced: bool,
}

impl QuadTracker {
    pub(crate) fn new(s: &DMatrix<f64>) -> Self {
        let dim = s.nrows();
        // column-major == row-major for symmetric S
        Self { dim, s: s.as_slice().to_vec(), v: vec![0.0; dim], value: 0.0, stale: 0, synced: false }
    }

    pub(crate) fn value(&mut self, x: &[f64]) -> f64 {
        if !self.synced || self.stale >= RESYNC_EVERY {
            let d = self.dim;
            for r in 0..d {
                self.v[r] = self.s[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            }
            self.value = self.v.iter().zip(x).map(|(a, b)| a * b).sum();
            self.stale = 0;
            self.synced = true;
        }
        self.value
    }

    pub(crate) fn flip(&mut self, a: usize, x_a: f64) {
        if !self.synced {
            return;
        }
        let d = self.dim;
        let col = &self.s[a * d..(a + 1) * d];
        // x' = x - 2 x_a e_a
        self.value += -4.0 * x_a * self.v[a] + 4.0 * col[a];
        for (v, c) in self.v.iter_mut().zip(col) {
            *v -= 2.0 * x_a * c;
        }
        self.stale += 1;
    }
}

/// Accumulates `G = sum_n w_n x_n x_n^T` and `r = sum_n c_n x_n`.
///
/// Entry `(a, b)`, `a < b`, of `G` is built from the segments on which `x_a` is constant:
/// each contributes `x_a (S(t1) - S(t0))` with `S_b(t)` the running total
/// of `w x_b`. `S` itself is piecewise linear in the running weight, so a
/// flip costs a few contiguous passes of length `dim`.
pub(crate) struct GramAccumulator {
    dim: usize,
    x: Vec<f64>,
    w_total: f64,
    c_total: f64,
    /// `S_b - x_b w_total`, constant between flips of `b`.
    s_offset: Vec<f64>,
    /// `S` at the last flip of each `a`, row-major.
    snap: Vec<f64>,
    gram: Vec<f64>,
    lin: Vec<f64>,
    lin_mark: Vec<f64>,
}

impl GramAccumulator {
    pub(crate) fn new(x0: &[f64]) -> Self {
        let dim = x0.len();
        Self {
            dim,
            x: x0.to_vec(),
            w_total: 0.0,
            c_total: 0.0,
            s_offset: vec![0.0; dim],
            snap: vec![0.0; dim * dim],
            gram: vec![0.0; dim * dim],
            lin: vec![0.0; dim],
            lin_mark: vec![0.0; dim],
        }
    }

    /// Adds one interval with Gram weight `w` and linear weight `c` on the
    /// current state.
    #[inline]
    pub(crate) fn add(&mut self, w: f64, c: f64) {
        self.w_total += w;
        self.c_total += c;
    }

    fn close_segment(&mut self, a: usize) {
        let d = self.dim;
        let w = self.w_total;
        let xa = self.x[a];
        // only the upper triangle b > a is kept
        let row = &mut self.gram[a * d + a + 1..(a + 1) * d];
        let snap = &mut self.snap[a * d + a + 1..(a + 1) * d];
        let (k, x) = (&self.s_offset[a + 1..], &self.x[a + 1..]);
        // S_b(now) = k_b + x_b w with k_b = S_b(mark) - x_b w_mark(b)
        for (((g, p), k), x) in row.iter_mut().zip(snap.iter_mut()).zip(k).zip(x) {
            let s = k + x * w;
            *g += xa * (s - *p);
            *p = s;
        }
        self.lin[a] += xa * (self.c_total - self.lin_mark[a]);
        self.lin_mark[a] = self.c_total;
    }

    /// Augmented entry `a` changes sign.
    pub(crate) fn flip(&mut self, a: usize) {
        self.close_segment(a);
        // keep S_a continuous across the sign change
        self.s_offset[a] += 2.0 * self.x[a] * self.w_total;
        self.x[a] = -self.x[a];
    }

    pub(crate) fn finish(mut self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim;
        for a in 0..d {
            self.close_segment(a);
        }
        let g = DMatrix::from_fn(d, d, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => self.w_total,
            std::cmp::Ordering::Less => self.gram[a * d + b],
            std::cmp::Ordering::Greater => self.gram[b * d + a],
        });
        (g, DVector::from_vec(self.lin))
    }
}
