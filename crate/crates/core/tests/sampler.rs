mod common;

use kinising::sampler::{generate_model, gillespie_sample, gillespie_sample_with_hook, GenConfig, ThetaMode};
use kinising::stats::means_and_correlations;
use kinising::IsingModel;
use nalgebra::{DMatrix, DVector};

#[test]
fn waiting_times_have_mean_one_over_gamma_n() {
    let gen = GenConfig { n_spins: 8, t_end: 50.0, g: 0.5, p_sparse: 0.0, theta_mode: ThetaMode::Zero, seed: 2 };
    let model = generate_model(&gen, 100.0).unwrap();
    let mut times = Vec::new();
    let mut accepted = 0usize;
    let traj = gillespie_sample_with_hook(&model, &[1; 8], 50.0, 2, |e| {
        times.push(e.t);
        accepted += usize::from(e.accepted);
    })
    .unwrap();
    assert_eq!(accepted, traj.flips().len());
    let waits: Vec<f64> = std::iter::once(times[0]).chain(times.windows(2).map(|w| w[1] - w[0])).collect();
    let n = waits.len() as f64;
    let mean = waits.iter().sum::<f64>() / n;
    let sd = (waits.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let expected = 1.0 / (100.0 * 8.0);
    assert!((mean - expected).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {expected}");
}

#[test]
fn isolated_spin_relaxes_to_tanh_theta() {
    // s = +1 is left at rate gamma e^-theta / (2 cosh theta) and entered at
    // gamma e^theta / (2 cosh theta), so the stationary mean is tanh(theta)
    for (k, theta) in [0.5f64, -1.2].into_iter().enumerate() {
        let model = IsingModel::new(DMatrix::zeros(1, 1), DVector::from_element(1, theta), 100.0).unwrap();
        let traj = gillespie_sample(&model, &[1], 200.0, 10 + k as u64).unwrap();
        let (m, _) = means_and_correlations(&traj);
        // correlation time 1/gamma: about gamma*T/2 independent blocks
        let blocks = 100.0 * 200.0 / 2.0;
        let se = (1.0 - theta.tanh().powi(2)).sqrt() / f64::sqrt(blocks);
        assert!((m[0] - theta.tanh()).abs() < 4.0 * se, "theta {theta}: {} vs {}", m[0], theta.tanh());
    }
}

#[test]
fn coupling_variance_is_g_squared_over_n() {
    let mut values = Vec::new();
    for seed in 0..10u64 {
        let gen = GenConfig { n_spins: 40, t_end: 1.0, g: 0.3, p_sparse: 0.0, theta_mode: ThetaMode::Zero, seed };
        values.extend(generate_model(&gen, 100.0).unwrap().couplings.iter().copied());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 0.09 / 40.0).abs() < 0.2 * 0.09 / 40.0, "{var}");
}

#[test]
fn sparsity_zeroes_the_expected_fraction() {
    let gen = GenConfig { n_spins: 60, t_end: 1.0, g: 0.3, p_sparse: 0.5, theta_mode: ThetaMode::Zero, seed: 4 };
    let j = generate_model(&gen, 100.0).unwrap().couplings;
    let zeros = j.iter().filter(|v| **v == 0.0).count() as f64 / 3600.0;
    assert!((zeros - 0.5).abs() < 4.0 * (0.25f64 / 3600.0).sqrt(), "{zeros}");
}

#[test]
fn same_seed_same_trajectory_different_seed_differs() {
    let gen = GenConfig { n_spins: 6, t_end: 5.0, g: 0.4, p_sparse: 0.0, theta_mode: ThetaMode::Zero, seed: 1 };
    let model = generate_model(&gen, 100.0).unwrap();
    let a = gillespie_sample(&model, &[1, -1, 1, -1, 1, -1], 5.0, 9).unwrap();
    let b = gillespie_sample(&model, &[1, -1, 1, -1, 1, -1], 5.0, 9).unwrap();
    let c = gillespie_sample(&model, &[1, -1, 1, -1, 1, -1], 5.0, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
