#![allow(dead_code)]

use kinising::repro::synthetic_data;
use kinising::sampler::{GenConfig, ThetaMode};
use kinising::{IsingModel, SpinTrajectory};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random model with Gaussian fields and the trajectory it generates.
pub fn instance(n: usize, t_end: f64, g: f64, gamma: f64, seed: u64) -> (IsingModel, SpinTrajectory) {
    let gen = GenConfig {
        n_spins: n,
        t_end,
        g,
        p_sparse: 0.0,
        theta_mode: ThetaMode::Gaussian { mean: 0.0, sd: 0.3 },
        seed,
    };
    synthetic_data(&gen, gamma).unwrap()
}

/// Model with every parameter uniform with standard deviation `sd`.
pub fn random_model(n: usize, sd: f64, gamma: f64, rng: &mut ChaCha8Rng) -> IsingModel {
    let mut draw = || sd * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
    let j = DMatrix::from_fn(n, n, |_, _| draw());
    let theta = nalgebra::DVector::from_fn(n, |_, _| draw());
    IsingModel::new(j, theta, gamma).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `ln sum exp` of a slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
