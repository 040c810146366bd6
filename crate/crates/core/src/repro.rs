//! End-to-end experiment pipelines: recovery of dense couplings with EM,
//! sparse couplings with L1-EM and variational Bayes, and a kinetic Ising
//! fit to binarized spiking-network data.
//!
//! Every pipeline is a pure function of its configuration; results expose
//! their CSV tables so front ends only decide where to write them.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::em::{em_fit, EmConfig, FitReport};
use crate::error::{Error, Result};
use crate::io::Table;
use crate::lif::{lif_simulate, select_and_binarize, BinarizedData, LifConfig, SpikeRecord};
use crate::model::{log_likelihood, IsingModel, SpinTrajectory};
use crate::numerics::log_grid;
use crate::sampler::{generate_model, gillespie_sample, random_initial_state, GenConfig, ThetaMode};
use crate::stats::{coupling_roc, mse, pearson, trajectory_stats, upper_offdiag, RocCurve, StatsReport};
use crate::vb::{best_lambda, sweep_lambda, sweep_lambda_warm, PriorConfig, RowPosteriorSet, VbReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Seconds-long runs that only exercise the plumbing.
    Smoke,
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::invalid(format!("unknown scale '{s}', expected smoke, desk or paper"))),
        }
    }
}

/// Ground truth plus a trajectory sampled from it, with the initial state
/// and dynamics drawn from `seed`.
pub fn synthetic_data(gen: &GenConfig, gamma: f64) -> Result<(IsingModel, SpinTrajectory)> {
    let model = generate_model(gen, gamma)?;
    let s0 = random_initial_state(gen.n_spins, gen.seed);
    let traj = gillespie_sample(&model, &s0, gen.t_end, gen.seed)?;
    Ok((model, traj))
}

fn roc_table(roc: &RocCurve) -> Table {
    let mut t = Table::new(&["threshold", "fpr", "tpr"]);
    for p in &roc.points {
        t.push(vec![p.threshold, p.fpr, p.tpr]);
    }
    t
}

fn matrix_pairs(header: &[&str], mats: &[&DMatrix<f64>]) -> Table {
    let mut t = Table::new(header);
    let (r, c) = mats[0].shape();
    for i in 0..r {
        for j in 0..c {
            let mut row = vec![i as f64, j as f64];
            row.extend(mats.iter().map(|m| m[(i, j)]));
            t.push(row);
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Fig1Config {
    pub n_spins: usize,
    pub t_end: f64,
    pub g: f64,
    pub gamma: f64,
    /// Data lengths for the error-versus-length curve.
    pub t_ladder: Vec<f64>,
    /// Coupling scales for the error-versus-strength curve, fitted at `t_g_sweep`.
    pub g_ladder: Vec<f64>,
    pub t_g_sweep: f64,
    pub em: EmConfig,
    pub seed: u64,
}

impl Fig1Config {
    pub fn at(scale: Scale) -> Self {
        let base = Self {
            n_spins: 40,
            t_end: 1000.0,
            g: 0.3,
            gamma: 100.0,
            t_ladder: vec![62.5, 125.0, 250.0, 500.0, 1000.0],
            g_ladder: vec![0.1, 0.3, 0.5],
            t_g_sweep: 250.0,
            em: EmConfig::default(),
            seed: 1,
        };
        match scale {
            Scale::Smoke => Self {
                n_spins: 8,
                t_end: 20.0,
                t_ladder: vec![5.0, 10.0, 20.0],
                g_ladder: vec![0.3],
                t_g_sweep: 10.0,
                ..base
            },
            Scale::Desk => base,
            Scale::Paper => Self {
                t_ladder: vec![125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0],
                g_ladder: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
                t_g_sweep: 1000.0,
                ..base
            },
        }
    }

    fn gen(&self, g: f64, t_end: f64, seed: u64) -> GenConfig {
        GenConfig { n_spins: self.n_spins, t_end, g, p_sparse: 0.0, theta_mode: ThetaMode::Zero, seed }
    }
}

#[derive(Clone, Debug)]
pub struct Fig1Result {
    pub truth: IsingModel,
    pub t_end: f64,
    pub fit: FitReport,
    pub n_flips: usize,
    pub pearson_j: f64,
    /// `(T, mse)` pairs.
    pub mse_vs_t: Vec<(f64, f64)>,
    /// `(g, mse)` pairs.
    pub mse_vs_g: Vec<(f64, f64)>,
}

impl Fig1Result {
    /// Least-squares slope of `ln mse` against `ln T`.
    pub fn loglog_slope(&self) -> f64 {
        let x: Vec<f64> = self.mse_vs_t.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = self.mse_vs_t.iter().map(|p| p.1.ln()).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        sxy / sxx
    }

    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut trace = Table::new(&["iter", "loglik"]);
        for it in &self.fit.trace {
            trace.push(vec![it.iter as f64, it.loglik]);
        }
        let mut by_t = Table::new(&["t_end", "mse"]);
        for &(t, m) in &self.mse_vs_t {
            by_t.push(vec![t, m]);
        }
        let mut by_g = Table::new(&["g", "mse"]);
        for &(g, m) in &self.mse_vs_g {
            by_g.push(vec![g, m]);
        }
        let mut summary = Table::new(&["n_spins", "t_end", "n_flips", "iterations", "converged", "pearson_j", "loglog_slope"]);
        summary.push(vec![
            self.truth.n_spins() as f64,
            self.t_end,
            self.n_flips as f64,
            self.fit.iterations as f64,
            f64::from(u8::from(self.fit.converged)),
            self.pearson_j,
            self.loglog_slope(),
        ]);
        vec![
            ("couplings.csv", matrix_pairs(&["i", "j", "j_true", "j_est"], &[&self.truth.couplings, &self.fit.model.couplings])),
            ("trace.csv", trace),
            ("mse_vs_T.csv", by_t),
            ("mse_vs_g.csv", by_g),
            ("summary.csv", summary),
        ]
    }
}

/// Dense Gaussian couplings recovered by plain EM, with error curves over
/// data length and coupling strength. The main fit uses `t_end`; shorter
/// ladder entries use independent trajectories from the same model.
pub fn run_fig1(cfg: &Fig1Config) -> Result<Fig1Result> {
    let (truth, traj) = synthetic_data(&cfg.gen(cfg.g, cfg.t_end, cfg.seed), cfg.gamma)?;
    let fit = em_fit(&traj, cfg.gamma, &cfg.em)?;
    let pearson_j = pearson(truth.couplings.as_slice(), fit.model.couplings.as_slice())?;
    let mse_vs_t: Result<Vec<(f64, f64)>> = cfg
        .t_ladder
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if t == cfg.t_end {
                return Ok((t, mse(&truth.couplings, &fit.model.couplings)?));
            }
            let seed = cfg.seed.wrapping_add(1000 + k as u64);
            let s0 = random_initial_state(cfg.n_spins, seed);
            let tr = gillespie_sample(&truth, &s0, t, seed)?;
            let f = em_fit(&tr, cfg.gamma, &cfg.em)?;
            Ok((t, mse(&truth.couplings, &f.model.couplings)?))
        })
        .collect();
    let mse_vs_g: Result<Vec<(f64, f64)>> = cfg
        .g_ladder
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let (m, tr) = synthetic_data(&cfg.gen(g, cfg.t_g_sweep, cfg.seed.wrapping_add(2000 + k as u64)), cfg.gamma)?;
            let f = em_fit(&tr, cfg.gamma, &cfg.em)?;
            Ok((g, mse(&m.couplings, &f.model.couplings)?))
        })
        .collect();
    Ok(Fig1Result { t_end: cfg.t_end, n_flips: traj.flips().len(), truth, fit, pearson_j, mse_vs_t: mse_vs_t?, mse_vs_g: mse_vs_g? })
}

#[derive(Clone, Debug)]
pub struct Fig2Config {
    pub n_spins: usize,
    pub t_train: f64,
    pub t_test: f64,
    pub g: f64,
    pub p_sparse: f64,
    pub gamma: f64,
    pub lambdas: Vec<f64>,
    pub em: EmConfig,
    pub vb: EmConfig,
    pub prior: PriorConfig,
    pub seed: u64,
}

impl Fig2Config {
    pub fn at(scale: Scale) -> Self {
        let (n_spins, t_end, n_grid) = match scale {
            Scale::Smoke => (6, 5.0, 3),
            Scale::Desk => (25, 50.0, 16),
            Scale::Paper => (25, 50.0, 31),
        };
        Self {
            n_spins,
            t_train: t_end,
            t_test: t_end,
            g: 0.3,
            p_sparse: 0.5,
            gamma: 100.0,
            lambdas: log_grid(1.0, 1000.0, n_grid),
            em: EmConfig { max_iters: 500, tol: 1e-9, ..EmConfig::default() },
            vb: EmConfig { max_iters: 500, tol: 1e-9, ..EmConfig::default() },
            prior: PriorConfig::new(1.0),
            seed: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmSweepPoint {
    pub lambda: f64,
    pub train_penalized: f64,
    pub test_loglik: f64,
    pub auc: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct VbSweepPoint {
    pub lambda: f64,
    pub free_energy: f64,
    pub auc: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct Fig2Result {
    pub truth: IsingModel,
    pub em: Vec<EmSweepPoint>,
    pub vb: Vec<VbSweepPoint>,
    pub lambda_em: f64,
    pub lambda_vb: f64,
    pub roc_em: RocCurve,
    pub roc_vb: RocCurve,
}

impl Fig2Result {
    pub fn auc_em(&self) -> f64 {
        self.roc_em.auc
    }

    pub fn auc_vb(&self) -> f64 {
        self.roc_vb.auc
    }

    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut em = Table::new(&["lambda", "train_penalized", "test_loglik", "auc", "iters"]);
        for p in &self.em {
            em.push(vec![p.lambda, p.train_penalized, p.test_loglik, p.auc, p.iterations as f64]);
        }
        let mut vb = Table::new(&["lambda", "free_energy", "auc", "iters"]);
        for p in &self.vb {
            vb.push(vec![p.lambda, p.free_energy, p.auc, p.iterations as f64]);
        }
        let mut summary = Table::new(&["lambda_em", "lambda_vb", "auc_em", "auc_vb"]);
        summary.push(vec![self.lambda_em, self.lambda_vb, self.auc_em(), self.auc_vb()]);
        vec![
            ("em_sweep.csv", em),
            ("vb_sweep.csv", vb),
            ("roc_em.csv", roc_table(&self.roc_em)),
            ("roc_vb.csv", roc_table(&self.roc_vb)),
            ("summary.csv", summary),
        ]
    }
}

/// Sparse couplings: L1-EM selects `lambda` by held-out likelihood, VB by
/// its free energy on the training data alone.
pub fn run_fig2(cfg: &Fig2Config) -> Result<Fig2Result> {
    let gen = GenConfig {
        n_spins: cfg.n_spins,
        t_end: cfg.t_train,
        g: cfg.g,
        p_sparse: cfg.p_sparse,
        theta_mode: ThetaMode::Zero,
        seed: cfg.seed,
    };
    let (truth, train) = synthetic_data(&gen, cfg.gamma)?;
    let test_seed = cfg.seed.wrapping_add(7919);
    let test = gillespie_sample(&truth, &random_initial_state(cfg.n_spins, test_seed), cfg.t_test, test_seed)?;

    let em_fits: Result<Vec<(EmSweepPoint, IsingModel)>> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let f = em_fit(&train, cfg.gamma, &EmConfig { lambda, ..cfg.em.clone() })?;
            let scores = f.model.couplings.abs();
            let point = EmSweepPoint {
                lambda,
                train_penalized: f.trace.last().map_or(f64::NAN, |t| t.penalized_obj),
                test_loglik: log_likelihood(&test, &f.model)?,
                auc: coupling_roc(&truth.couplings, &scores, false)?.auc,
                iterations: f.iterations,
            };
            Ok((point, f.model))
        })
        .collect();
    let em_fits = em_fits?;
    let best_em = em_fits
        .iter()
        .max_by(|a, b| a.0.test_loglik.total_cmp(&b.0.test_loglik))
        .ok_or_else(|| Error::invalid("empty lambda grid"))?;
    let roc_em = coupling_roc(&truth.couplings, &best_em.1.couplings.abs(), false)?;
    let lambda_em = best_em.0.lambda;

    let sweep = sweep_lambda(&train, cfg.gamma, &cfg.lambdas, &cfg.prior, &cfg.vb)?;
    let vb: Result<Vec<VbSweepPoint>> = sweep
        .iter()
        .map(|(lambda, rep)| {
            Ok(VbSweepPoint {
                lambda: *lambda,
                free_energy: rep.free_energy,
                auc: coupling_roc(&truth.couplings, &rep.posterior.coupling_scores(), false)?.auc,
                iterations: rep.iterations,
            })
        })
        .collect();
    let (lambda_vb, best_vb) = best_lambda(&sweep).ok_or_else(|| Error::invalid("empty lambda grid"))?;
    let roc_vb = coupling_roc(&truth.couplings, &best_vb.posterior.coupling_scores(), false)?;
    Ok(Fig2Result {
        truth,
        em: em_fits.into_iter().map(|p| p.0).collect(),
        vb: vb?,
        lambda_em,
        lambda_vb: *lambda_vb,
        roc_em,
        roc_vb,
    })
}

#[derive(Clone, Debug)]
pub struct Fig3Config {
    pub lif: LifConfig,
    pub keep_e: usize,
    pub keep_i: usize,
    pub active_ms: f64,
    pub gamma: f64,
    pub lambdas: Vec<f64>,
    pub vb: EmConfig,
    pub prior: PriorConfig,
    pub subset_budget: usize,
    pub seed: u64,
}

impl Fig3Config {
    pub fn at(scale: Scale) -> Self {
        let (lif, lambdas) = match scale {
            Scale::Smoke => (LifConfig { t_end: 5.0, seed: 3, ..LifConfig::desk() }, log_grid(3.0, 30.0, 2)),
            Scale::Desk => (LifConfig { t_end: 100.0, seed: 3, ..LifConfig::desk() }, log_grid(1.0, 1000.0, 7)),
            Scale::Paper => (LifConfig { t_end: 1000.0, seed: 3, ..LifConfig::default() }, log_grid(1.0, 1000.0, 12)),
        };
        let base = Self {
            lif,
            keep_e: 30,
            keep_i: 10,
            active_ms: 10.0,
            gamma: 100.0,
            lambdas,
            vb: EmConfig { max_iters: 200, tol: 1e-7, ..EmConfig::default() },
            prior: PriorConfig::new(1.0),
            subset_budget: crate::stats::DEFAULT_SUBSET_BUDGET,
            seed: 3,
        };
        match scale {
            Scale::Smoke => Self { keep_e: 8, keep_i: 4, subset_budget: 200, ..base },
            _ => base,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fig3Result {
    pub spikes: SpikeRecord,
    pub data: BinarizedData,
    pub resampled: SpinTrajectory,
    pub lambda_vb: f64,
    pub sweep: Vec<(f64, f64, usize)>,
    pub posterior: RowPosteriorSet,
    pub stats_data: StatsReport,
    pub stats_model: StatsReport,
    /// Pearson correlations of `m`, `C_ij`, `C_ijk`, `C_ijkl` between data and model.
    pub pearson: [f64; 4],
    pub roc: RocCurve,
}

impl Fig3Result {
    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let n = self.posterior.n_spins();
        let mut c2 = Table::new(&["i", "j", "c_data", "c_model"]);
        for i in 0..n {
            for j in i + 1..n {
                c2.push(vec![i as f64, j as f64, self.stats_data.c2[(i, j)], self.stats_model.c2[(i, j)]]);
            }
        }
        let mut m = Table::new(&["i", "m_data", "m_model"]);
        for i in 0..n {
            m.push(vec![i as f64, self.stats_data.m[i], self.stats_model.m[i]]);
        }
        let mut pear = Table::new(&["order", "pearson"]);
        for (k, p) in self.pearson.iter().enumerate() {
            pear.push(vec![k as f64 + 1.0, *p]);
        }
        let mut sweep = Table::new(&["lambda", "free_energy", "iters"]);
        for &(l, f, it) in &self.sweep {
            sweep.push(vec![l, f, it as f64]);
        }
        let mu = self.posterior.coupling_means();
        let mut sym = Table::new(&["i", "j", "j_ij", "j_ji", "synapse"]);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sym.push(vec![i as f64, j as f64, mu[(i, j)], mu[(j, i)], f64::from(u8::from(self.data.synapses[(i, j)]))]);
                }
            }
        }
        let mut summary =
            Table::new(&["n_spins", "n_flips", "lambda_vb", "pearson_m", "pearson_c2", "pearson_c3", "pearson_c4", "auc"]);
        summary.push(vec![
            n as f64,
            self.data.trajectory.flips().len() as f64,
            self.lambda_vb,
            self.pearson[0],
            self.pearson[1],
            self.pearson[2],
            self.pearson[3],
            self.roc.auc,
        ]);
        vec![
            ("c2_scatter.csv", c2),
            ("m_scatter.csv", m),
            ("pearson.csv", pear),
            ("vb_sweep.csv", sweep),
            ("roc.csv", roc_table(&self.roc)),
            ("symmetry.csv", sym),
            ("summary.csv", summary),
        ]
    }
}

fn moment_pearson(a: &StatsReport, b: &StatsReport) -> Result<[f64; 4]> {
    let vals = |r: &StatsReport, k: usize| -> Vec<f64> {
        match k {
            0 => r.m.iter().copied().collect(),
            1 => upper_offdiag(&r.c2),
            2 => r.c3.iter().map(|t| t.value).collect(),
            _ => r.c4.iter().map(|t| t.value).collect(),
        }
    };
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        *o = pearson(&vals(a, k), &vals(b, k))?;
    }
    Ok(out)
}

/// Binarized LIF data fitted by VB, resampled from the posterior-mean
/// model and compared moment by moment; the posterior z-scores are scored
/// against the true synapses among the kept neurons.
pub fn run_fig3(cfg: &Fig3Config) -> Result<Fig3Result> {
    let spikes = lif_simulate(&cfg.lif)?;
    run_fig3_on(cfg, spikes)
}

/// [`run_fig3`] on an existing spike record.
pub fn run_fig3_on(cfg: &Fig3Config, spikes: SpikeRecord) -> Result<Fig3Result> {
    let data = select_and_binarize(&spikes, cfg.keep_e, cfg.keep_i, cfg.active_ms)?;
    let traj = &data.trajectory;
    let sweep = sweep_lambda_warm(traj, cfg.gamma, &cfg.lambdas, &cfg.prior, &cfg.vb)?;
    let (lambda_vb, best) = best_lambda(&sweep).ok_or_else(|| Error::invalid("empty lambda grid"))?;
    let best: &VbReport = best;
    let model = best.posterior.mean_model(cfg.gamma)?;
    let resampled = gillespie_sample(&model, traj.initial_state(), traj.t_end(), cfg.seed)?;
    let stats_data = trajectory_stats(traj, 4, cfg.subset_budget, cfg.seed)?;
    let stats_model = trajectory_stats(&resampled, 4, cfg.subset_budget, cfg.seed)?;
    let pearson = moment_pearson(&stats_data, &stats_model)?;
    let truth = data.synapses.map(|b| if b { 1.0 } else { 0.0 });
    let roc = coupling_roc(&truth, &best.posterior.coupling_scores(), true)?;
    Ok(Fig3Result {
        lambda_vb: *lambda_vb,
        sweep: sweep.iter().map(|(l, r)| (*l, r.free_energy, r.iterations)).collect(),
        posterior: best.posterior.clone(),
        spikes,
        data,
        resampled,
        stats_data,
        stats_model,
        pearson,
        roc,
    })
}
