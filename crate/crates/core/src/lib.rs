//! Inference of couplings and fields of a continuous-time kinetic Ising
//! model from observed spin trajectories.

pub mod em;
pub mod error;
pub mod io;
pub mod lif;
pub mod moments;
pub mod model;
pub mod numerics;
pub mod repro;
pub mod sampler;
pub mod stats;
mod sweep;
pub mod vb;

pub use em::{em_estep, em_fit, em_mstep, EmConfig, EmInit, FitReport};
pub use error::{Error, Result};
pub use model::{
    build_interval_table, discrete_log_prob, flip_probability, log_likelihood, Flip, IntervalTable, IsingModel, Spin,
    SpinTrajectory,
};
pub use moments::AugmentedMoments;
pub use vb::{free_energy, vb_fit, PriorConfig, RowPosterior, RowPosteriorSet, VbReport};
