mod common;

use common::instance;
use kinising::io::{self, Table};
use kinising::lif::{lif_simulate, LifConfig};
use kinising::vb::{RowPosterior, RowPosteriorSet};
use kinising::{Flip, IsingModel, SpinTrajectory};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn arb_trajectory() -> impl Strategy<Value = SpinTrajectory> {
    (1usize..6, 0.1f64..50.0).prop_flat_map(|(n, t_end)| {
        (
            Just(t_end),
            proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n),
            proptest::collection::vec((0.0f64..1.0, 0..n), 0..40),
        )
            .prop_map(|(t_end, s0, raw)| {
                let mut flips: Vec<Flip> = raw.into_iter().map(|(u, i)| Flip { t: (0.001 + 0.998 * u) * t_end, i }).collect();
                flips.sort_by(|a, b| a.t.total_cmp(&b.t));
                SpinTrajectory::with_jittered_ties(t_end, s0, flips).unwrap()
            })
    })
}

fn arb_model() -> impl Strategy<Value = IsingModel> {
    (1usize..6).prop_flat_map(|n| {
        (
            proptest::collection::vec(-1e3f64..1e3, n * n),
            proptest::collection::vec(-1e3f64..1e3, n),
            1e-3f64..1e4,
        )
            .prop_map(move |(j, th, g)| IsingModel::new(DMatrix::from_vec(n, n, j), DVector::from_vec(th), g).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_json_round_trips(traj in arb_trajectory(), gamma in proptest::option::of(0.1f64..1e3)) {
        let v = io::trajectory_to_json(&traj, gamma);
        let text = serde_json::to_string(&v).unwrap();
        let (back, g) = io::trajectory_from_json(serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, traj);
        prop_assert_eq!(g, gamma);
    }

    #[test]
    fn model_json_round_trips(model in arb_model()) {
        let text = serde_json::to_string(&io::model_to_json(&model)).unwrap();
        let back = io::model_from_json(serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn sampled_trajectories_are_valid(seed in 0u64..1000, n in 1usize..6, g in 0.0f64..2.0) {
        let (_, traj) = instance(n, 1.0, g, 50.0, seed);
        let flips = traj.flips();
        prop_assert!(flips.windows(2).all(|w| w[0].t < w[1].t));
        prop_assert!(flips.iter().all(|f| f.t > 0.0 && f.t < 1.0 && f.i < n));
        // rebuilding through the constructor accepts it unchanged
        let again = SpinTrajectory::new(traj.t_end(), traj.initial_state().to_vec(), flips.to_vec()).unwrap();
        prop_assert_eq!(again, traj);
    }

    #[test]
    fn likelihood_is_finite_and_auc_bounded(seed in 0u64..500) {
        let (model, traj) = instance(4, 0.5, 1.0, 50.0, seed);
        prop_assert!(kinising::log_likelihood(&traj, &model).unwrap().is_finite());
        let truth: Vec<bool> = (0..16).map(|k| k % 3 == 0).collect();
        let scores: Vec<f64> = model.couplings.iter().copied().collect();
        let auc = kinising::stats::roc_auc(&truth, &scores).unwrap().auc;
        prop_assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn posterior_json_round_trips_and_validates() {
    let cov = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.25, 0.01, 0.0, 0.01, 1.0 / 3.0]);
    let rows = vec![
        RowPosterior { mean: DVector::from_vec(vec![0.1, -0.3, 7.0]), cov },
        RowPosterior { mean: DVector::from_vec(vec![1.0 / 3.0, 2e-17, -1e300]), cov: DMatrix::identity(3, 3) },
    ];
    let post = RowPosteriorSet { rows };
    let back = io::posterior_from_json(io::posterior_to_json(&post)).unwrap();
    assert_eq!(back, post);
    let bad = serde_json::json!({"rows": [{"mu": [0.0, 0.0], "sigma": [[1.0, 2.0], [2.0, 1.0]]}, {"mu": [0.0, 0.0], "sigma": [[1.0, 0.0], [0.0, 1.0]]}]});
    assert!(io::posterior_from_json(bad).is_err());
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, traj) = instance(3, 2.0, 0.5, 20.0, 1);
    let p = dir.path().join("traj.json");
    io::write_trajectory(&p, &traj, Some(20.0)).unwrap();
    assert_eq!(io::read_trajectory(&p).unwrap(), (traj, Some(20.0)));
    let p = dir.path().join("model.json");
    io::write_model(&p, &model).unwrap();
    assert_eq!(io::read_model(&p).unwrap(), model);

    let rec = lif_simulate(&LifConfig { t_end: 0.5, seed: 2, ..LifConfig::desk() }).unwrap();
    let p = dir.path().join("spikes.json");
    io::write_spikes(&p, &rec).unwrap();
    assert_eq!(io::read_spikes(&p).unwrap(), rec);

    let mut t = Table::new(&["a", "b"]);
    t.push(vec![1.0, 0.1 + 0.2]);
    t.push(vec![f64::INFINITY, -2.5e-300]);
    let p = dir.path().join("t.csv");
    io::write_csv(&p, &t).unwrap();
    assert_eq!(io::read_csv(&p).unwrap(), t);
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,0.30000000000000004\ninf,-2.5e-300\n");
}
