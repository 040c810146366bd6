mod common;

use common::{instance, random_model, rng};
use kinising::em::em_estep;
use kinising::moments::compute_em_moments;
use kinising::{build_interval_table, discrete_log_prob, flip_probability, log_likelihood, IsingModel};

fn perturbed(model: &IsingModel, i: usize, k: usize, h: f64) -> IsingModel {
    let mut m = model.clone();
    if k == 0 {
        m.fields[i] += h;
    } else {
        m.couplings[(i, k - 1)] += h;
    }
    m
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(11);
    for (seed, n) in [(1u64, 2usize), (2, 3), (3, 5)] {
        let (_, traj) = instance(n, 3.0, 0.5, 50.0, seed);
        let model = random_model(n, 0.4, 50.0, &mut r);
        let (system, _) = em_estep(&traj, &model).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let row = model.row(i);
            let analytic = &system.b[i] - &system.a[i] * &row;
            let scale = analytic.amax();
            for k in 0..=n {
                let up = log_likelihood(&traj, &perturbed(&model, i, k, h)).unwrap();
                let down = log_likelihood(&traj, &perturbed(&model, i, k, -h)).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-4 * scale, "n={n} i={i} k={k}: fd {fd} vs {}", analytic[k]);
            }
        }
    }
}

#[test]
fn incremental_fields_match_brute_force() {
    let mut r = rng(5);
    let (_, traj) = instance(6, 2.0, 0.4, 30.0, 9);
    let model = random_model(6, 0.5, 30.0, &mut r);
    let table = build_interval_table(&traj, &model).unwrap();
    assert_eq!(table.n_intervals(), traj.flips().len() + 1);
    let mut t0 = 0.0;
    for n in 0..table.n_intervals() {
        let state = traj.state_at(t0);
        assert_eq!(table.state(n), &state[..]);
        let h = model.fields_at(&state);
        for (a, b) in table.fields(n).iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        t0 += table.duration(n);
    }
}

#[test]
fn flip_probability_far_tail() {
    // e^-100 / (1 + e^-100) to double precision
    let reference = 3.720075976020836e-44;
    assert!(((flip_probability(1, 50.0) - reference) / reference).abs() < 1e-12);
    assert_eq!(flip_probability(-1, 50.0), 1.0);
}

#[test]
fn poisson_means_integrate_the_survival_rate() {
    let mut r = rng(8);
    let (_, traj) = instance(4, 2.0, 0.4, 40.0, 4);
    let model = random_model(4, 0.5, 40.0, &mut r);
    let table = build_interval_table(&traj, &model).unwrap();
    let m = compute_em_moments(&table, &model).unwrap();
    let total_rho: f64 = m.interval_rho.iter().sum();
    // sum_i gamma * int exp(s_i H_i) / (2 cosh H_i) dt, interval by interval from the raw flips
    let mut times = vec![0.0];
    times.extend(traj.flips().iter().map(|f| f.t));
    times.push(traj.t_end());
    let mut direct = 0.0;
    for w in times.windows(2) {
        let s = traj.state_at(0.5 * (w[0] + w[1]));
        let h = model.fields_at(&s);
        for i in 0..4 {
            let sh = f64::from(s[i]) * h[i];
            direct += model.gamma * (w[1] - w[0]) * sh.exp() / (2.0 * h[i].cosh());
        }
    }
    assert!((total_rho - direct).abs() < 1e-9 * direct);
}

#[test]
fn discrete_oracle_converges_at_first_order() {
    // Per-pair errors carry cell-offset noise, so the order is read off the
    // summed error over several pairs of models. Two flips sharing a cell
    // cost an O(1) error with O(dt) probability, which swamps the smooth
    // part on a handful of trajectories, so only trajectories whose flips
    // are all further apart than the coarsest step are used.
    let gamma = 100.0;
    let mut r = rng(21);
    let steps = [1e-3, 5e-4, 2.5e-4];
    let mut errs = [0.0; 3];
    let mut used = 0;
    for pair in 0..40u64 {
        let (_, traj) = instance(3, 1.0, 0.5, gamma, 100 + pair);
        let m1 = random_model(3, 0.5, gamma, &mut r);
        let m2 = random_model(3, 0.5, gamma, &mut r);
        let min_gap = traj.flips().windows(2).map(|w| w[1].t - w[0].t).fold(f64::INFINITY, f64::min);
        if min_gap < 2.0 * steps[0] / gamma {
            continue;
        }
        let exact = log_likelihood(&traj, &m1).unwrap() - log_likelihood(&traj, &m2).unwrap();
        let diffs: Vec<f64> = steps
            .iter()
            .map(|&c| {
                let dt = c / gamma;
                discrete_log_prob(&traj, &m1, dt).unwrap() - discrete_log_prob(&traj, &m2, dt).unwrap()
            })
            .collect();
        used += 1;
        for (e, d) in errs.iter_mut().zip(diffs) {
            *e += (d - exact).abs();
        }
    }
    assert!(used >= 6, "only {used} usable trajectories");
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 0.9, "errors {errs:?}");
    }
}
