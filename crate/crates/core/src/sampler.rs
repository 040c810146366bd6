//! Exact simulation of Glauber dynamics and random ground-truth models.
//!
//! The Gillespie sampler uses ChaCha8 seeded with `seed_from_u64`. Each
//! update draws, in this order, the waiting time `-ln(1 - U) / (gamma N)`,
//! the spin index uniformly in `0..N`, and a coin `U < p_flip`. Model
//! draws, initial states and trajectories use separate ChaCha streams of
//! the same seed so that changing one never perturbs the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{flip_probability, Flip, IsingModel, Spin, SpinTrajectory};

const MODEL_STREAM: u64 = 0;
const STATE_STREAM: u64 = 1;
const DYNAMICS_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaMode {
    Zero,
    Gaussian { mean: f64, sd: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub n_spins: usize,
    pub t_end: f64,
    /// Couplings have standard deviation `g / sqrt(N)`.
    pub g: f64,
    /// Probability that a coupling is set to zero.
    pub p_sparse: f64,
    pub theta_mode: ThetaMode,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_spins == 0 {
            return Err(Error::invalid("n_spins must be >= 1"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::invalid("t_end must be positive"));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::invalid("g must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_sparse) {
            return Err(Error::invalid("p_sparse must lie in [0, 1]"));
        }
        if let ThetaMode::Gaussian { mean, sd } = self.theta_mode {
            if !(mean.is_finite() && sd >= 0.0 && sd.is_finite()) {
                return Err(Error::invalid("theta distribution needs finite mean and sd >= 0"));
            }
        }
        Ok(())
    }
}

/// Draws `J_ij ~ N(0, g^2/N)`, zeroed with probability `p_sparse`, and
/// fields per `theta_mode`.
pub fn generate_model(cfg: &GenConfig, gamma: f64) -> Result<IsingModel> {
    cfg.validate()?;
    let n = cfg.n_spins;
    let mut rng = stream_rng(cfg.seed, MODEL_STREAM);
    let normal = Normal::new(0.0, cfg.g / (n as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut j = nalgebra::DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let v = normal.sample(&mut rng);
            // always consume the mask draw so p_sparse does not shift the stream
            let keep = rng.random::<f64>() >= cfg.p_sparse;
            j[(r, c)] = if keep { v } else { 0.0 };
        }
    }
    let theta = match cfg.theta_mode {
        ThetaMode::Zero => nalgebra::DVector::zeros(n),
        ThetaMode::Gaussian { mean, sd } => {
            let d = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
            nalgebra::DVector::from_fn(n, |_, _| d.sample(&mut rng))
        }
    };
    IsingModel::new(j, theta, gamma)
}

/// Independent uniform `+-1` spins.
pub fn random_initial_state(n: usize, seed: u64) -> Vec<Spin> {
    let mut rng = stream_rng(seed, STATE_STREAM);
    (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

/// One attempted update, accepted or not.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateEvent {
    pub t: f64,
    pub spin: usize,
    pub accepted: bool,
}

pub fn gillespie_sample(model: &IsingModel, s0: &[Spin], t_end: f64, seed: u64) -> Result<SpinTrajectory> {
    gillespie_sample_with_hook(model, s0, t_end, seed, |_| {})
}

/// [`gillespie_sample`] reporting every attempted update inside
/// `[0, t_end)` to `hook`.
pub fn gillespie_sample_with_hook(
    model: &IsingModel,
    s0: &[Spin],
    t_end: f64,
    seed: u64,
    mut hook: impl FnMut(UpdateEvent),
) -> Result<SpinTrajectory> {
    let n = model.n_spins();
    if s0.len() != n {
        return Err(Error::dimension(format!("initial state has {} spins, model {n}", s0.len())));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid("t_end must be positive"));
    }
    let mut rng = stream_rng(seed, DYNAMICS_STREAM);
    let total_rate = model.gamma * n as f64;
    let mut s: Vec<Spin> = s0.to_vec();
    let mut flips = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total_rate;
        let i = rng.random_range(0..n);
        let coin: f64 = rng.random();
        if t >= t_end {
            break;
        }
        let h = model.fields[i] + (0..n).map(|j| model.couplings[(i, j)] * f64::from(s[j])).sum::<f64>();
        let accepted = coin < flip_probability(s[i], h);
        hook(UpdateEvent { t, spin: i, accepted });
        if accepted {
            s[i] = -s[i];
            flips.push(Flip { t, i });
        }
    }
    SpinTrajectory::with_jittered_ties(t_end, s0.to_vec(), flips)
}
