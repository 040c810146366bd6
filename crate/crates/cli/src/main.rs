//! `kinising`: simulate kinetic Ising and spiking data, fit couplings,
//! evaluate fits and rerun the figure pipelines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use kinising::em::{em_fit, EmConfig};
use kinising::io::{self, Table};
use kinising::lif::{lif_simulate, select_and_binarize, LifConfig};
use kinising::numerics::log_grid;
use kinising::repro::{run_fig1, run_fig2, run_fig3, Fig1Config, Fig2Config, Fig3Config, Scale};
use kinising::sampler::{GenConfig, ThetaMode};
use kinising::stats::{coupling_roc, mse, mse_with_fields, trajectory_stats};
use kinising::vb::{sweep_lambda, vb_fit, HalfStep, PriorConfig};
use kinising::{Error, SpinTrajectory};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "kinising", version, about = "Kinetic Ising simulation and inference")]
struct Cli {
    /// Worker threads (also KINISING_THREADS); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random model and sample a trajectory from it.
    Generate(GenerateArgs),
    /// Simulate the spiking network and binarize the most active neurons.
    LifSim(LifArgs),
    /// Fit couplings by (L1-penalized) EM.
    FitEm(FitEmArgs),
    /// Fit a variational posterior over couplings.
    FitVb(FitVbArgs),
    /// Variational free energy over a grid of prior scales.
    SweepLambda(SweepArgs),
    /// Evaluate trajectories and fits.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run a figure pipeline end to end.
    Repro(ReproArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    t_end: f64,
    #[arg(long, default_value_t = 0.3)]
    g: f64,
    #[arg(long, default_value_t = 100.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    p_sparse: f64,
    /// Draw fields from N(theta_mean, theta_sd^2) instead of zero.
    #[arg(long)]
    theta_sd: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    theta_mean: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_traj: PathBuf,
}

#[derive(Args, Debug)]
struct LifArgs {
    /// Simulated time in seconds.
    #[arg(long, default_value_t = 1000.0)]
    t_end: f64,
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    conductance_scale: Option<f64>,
    #[arg(long, default_value_t = 30)]
    keep_e: usize,
    #[arg(long, default_value_t = 10)]
    keep_i: usize,
    #[arg(long, default_value_t = 10.0)]
    active_ms: f64,
    #[arg(long)]
    out_spikes: PathBuf,
    #[arg(long)]
    out_traj: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    traj: PathBuf,
    /// Update rate; taken from the trajectory file when omitted.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
}

#[derive(Args, Debug)]
struct FitEmArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PriorArgs {
    #[arg(long, default_value_t = 0.0)]
    mu_theta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_theta: f64,
}

#[derive(Args, Debug)]
struct FitVbArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    out_posterior: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    prior: PriorArgs,
    /// `lo:hi:Nlog`, `lo:hi:Nlin` or a comma-separated list.
    #[arg(long, default_value = "1:1000:12log")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Means, correlations and higher central moments of a trajectory.
    Stats(StatsArgs),
    /// Mean squared error between two models.
    Mse(MseArgs),
    /// ROC curve for detecting the nonzero couplings of a reference model.
    Roc(RocArgs),
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = kinising::stats::DEFAULT_SUBSET_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MseArgs {
    #[arg(long = "true")]
    truth: PathBuf,
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    include_theta: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[arg(long = "true")]
    truth: PathBuf,
    /// Point estimate scored by `|J|`.
    #[arg(long, conflicts_with = "posterior")]
    est: Option<PathBuf>,
    /// Posterior scored by `|<J>| / sd(J)`.
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[arg(long)]
    exclude_diagonal: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproArgs {
    /// fig1, fig2 or fig3.
    figure: String,
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest_path: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    subcommand: String,
    argv: Vec<String>,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    wall_time_s: f64,
    version: String,
}

/// Paths and seeds touched by a run.
#[derive(Default)]
struct RunLog {
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunLog {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }
}

fn read_traj(path: &Path, gamma: Option<f64>, log: &mut RunLog) -> kinising::Result<(SpinTrajectory, f64)> {
    log.input(path);
    let (traj, stored) = io::read_trajectory(path)?;
    let gamma = gamma.or(stored).ok_or_else(|| invalid("no --gamma given and none stored with the trajectory"))?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid("gamma must be positive"));
    }
    Ok((traj, gamma))
}

fn invalid(msg: &str) -> Error {
    Error::Invalid(msg.to_string())
}

fn write_table(path: &Path, t: &Table, log: &mut RunLog) -> kinising::Result<()> {
    io::write_csv(path, t)?;
    log.output(path);
    Ok(())
}

fn parse_grid(spec: &str) -> kinising::Result<Vec<f64>> {
    let bad = || invalid(&format!("bad grid '{spec}'"));
    let grid: Vec<f64> = if let [lo, hi, n] = spec.split(':').collect::<Vec<_>>()[..] {
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        let (count, log) = match (n.strip_suffix("log"), n.strip_suffix("lin")) {
            (Some(c), _) => (c, true),
            (_, Some(c)) => (c, false),
            _ => (n, true),
        };
        let count: usize = count.parse().map_err(|_| bad())?;
        if log {
            log_grid(lo, hi, count)
        } else if count == 1 {
            vec![lo]
        } else {
            (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
        }
    } else {
        spec.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(invalid("lambda grid must hold positive values"));
    }
    Ok(grid)
}

fn em_config(f: &FitArgs, lambda: f64) -> EmConfig {
    EmConfig { max_iters: f.max_iters, tol: f.tol, lambda, ..EmConfig::default() }
}

fn run_generate(a: &GenerateArgs, log: &mut RunLog) -> kinising::Result<()> {
    let theta_mode = match a.theta_sd {
        Some(sd) => ThetaMode::Gaussian { mean: a.theta_mean, sd },
        None => ThetaMode::Zero,
    };
    let gen = GenConfig { n_spins: a.n, t_end: a.t_end, g: a.g, p_sparse: a.p_sparse, theta_mode, seed: a.seed };
    if !(a.gamma > 0.0 && a.gamma.is_finite()) {
        return Err(invalid("gamma must be positive"));
    }
    let (model, traj) = kinising::repro::synthetic_data(&gen, a.gamma)?;
    log.seeds.push(a.seed);
    io::write_model(&a.out_model, &model)?;
    log.output(&a.out_model);
    io::write_trajectory(&a.out_traj, &traj, Some(a.gamma))?;
    log.output(&a.out_traj);
    Ok(())
}

fn run_lif(a: &LifArgs, log: &mut RunLog) -> kinising::Result<()> {
    let base = match a.scale.parse::<Scale>()? {
        Scale::Smoke | Scale::Desk => LifConfig::desk(),
        Scale::Paper => LifConfig::default(),
    };
    let cfg = LifConfig {
        t_end: a.t_end,
        seed: a.seed,
        conductance_scale: a.conductance_scale.unwrap_or(base.conductance_scale),
        ..base
    };
    log.seeds.push(a.seed);
    let rec = lif_simulate(&cfg)?;
    io::write_spikes(&a.out_spikes, &rec)?;
    log.output(&a.out_spikes);
    let data = select_and_binarize(&rec, a.keep_e, a.keep_i, a.active_ms)?;
    io::write_trajectory(&a.out_traj, &data.trajectory, Some(1e3 / a.active_ms))?;
    log.output(&a.out_traj);
    Ok(())
}

fn run_fit_em(a: &FitEmArgs, log: &mut RunLog) -> kinising::Result<()> {
    let (traj, gamma) = read_traj(&a.fit.traj, a.fit.gamma, log)?;
    let rep = em_fit(&traj, gamma, &em_config(&a.fit, a.lambda))?;
    io::write_model(&a.out, &rep.model)?;
    log.output(&a.out);
    if let Some(p) = &a.trace {
        let mut t = Table::new(&["iter", "loglik", "penalized_obj"]);
        for it in &rep.trace {
            t.push(vec![it.iter as f64, it.loglik, it.penalized_obj]);
        }
        write_table(p, &t, log)?;
    }
    Ok(())
}

fn prior_of(p: &PriorArgs, lambda: f64) -> PriorConfig {
    PriorConfig { lambda, mu_theta: p.mu_theta, lambda_theta: p.lambda_theta }
}

fn run_fit_vb(a: &FitVbArgs, log: &mut RunLog) -> kinising::Result<()> {
    let (traj, gamma) = read_traj(&a.fit.traj, a.fit.gamma, log)?;
    let rep = vb_fit(&traj, gamma, &prior_of(&a.prior, a.lambda), &em_config(&a.fit, 0.0))?;
    io::write_posterior(&a.out_posterior, &rep.posterior)?;
    log.output(&a.out_posterior);
    if let Some(p) = &a.trace {
        let mut t = Table::new(&["iter", "half_step", "free_energy"]);
        for s in &rep.trace {
            let half = if s.step == HalfStep::Q1 { 1.0 } else { 2.0 };
            t.push(vec![s.iter as f64, half, s.free_energy]);
        }
        write_table(p, &t, log)?;
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs, log: &mut RunLog) -> kinising::Result<()> {
    let (traj, gamma) = read_traj(&a.fit.traj, a.fit.gamma, log)?;
    let grid = parse_grid(&a.grid)?;
    let sweep = sweep_lambda(&traj, gamma, &grid, &prior_of(&a.prior, 1.0), &em_config(&a.fit, 0.0))?;
    let mut t = Table::new(&["lambda", "free_energy", "iters"]);
    for (l, rep) in &sweep {
        t.push(vec![*l, rep.free_energy, rep.iterations as f64]);
    }
    write_table(&a.out, &t, log)
}

fn run_eval(e: &EvalCommand, log: &mut RunLog) -> kinising::Result<()> {
    match e {
        EvalCommand::Stats(a) => {
            let (traj, _) = {
                log.input(&a.traj);
                io::read_trajectory(&a.traj)?
            };
            log.seeds.push(a.seed);
            let r = trajectory_stats(&traj, a.order, a.budget, a.seed)?;
            // order 1 rows hold the means; unused index columns are -1
            let mut t = Table::new(&["order", "i", "j", "k", "l", "value"]);
            for (i, m) in r.m.iter().enumerate() {
                t.push(vec![1.0, i as f64, -1.0, -1.0, -1.0, *m]);
            }
            let n = traj.n_spins();
            for i in 0..n {
                for j in 0..n {
                    t.push(vec![2.0, i as f64, j as f64, -1.0, -1.0, r.c2[(i, j)]]);
                }
            }
            for (order, list) in [(3.0, &r.c3), (4.0, &r.c4)] {
                for tm in list {
                    let mut row = vec![order];
                    row.extend((0..4).map(|k| tm.indices.get(k).map_or(-1.0, |v| *v as f64)));
                    row.push(tm.value);
                    t.push(row);
                }
            }
            write_table(&a.out, &t, log)
        }
        EvalCommand::Mse(a) => {
            log.input(&a.truth);
            log.input(&a.est);
            let truth = io::read_model(&a.truth)?;
            let est = io::read_model(&a.est)?;
            let v = if a.include_theta {
                mse_with_fields(&truth.couplings, &truth.fields, &est.couplings, &est.fields)?
            } else {
                mse(&truth.couplings, &est.couplings)?
            };
            let mut t = Table::new(&["mse"]);
            t.push(vec![v]);
            println!("mse={v}");
            write_table(&a.out, &t, log)
        }
        EvalCommand::Roc(a) => {
            log.input(&a.truth);
            let truth = io::read_model(&a.truth)?;
            let scores = match (&a.est, &a.posterior) {
                (Some(p), None) => {
                    log.input(p);
                    io::read_model(p)?.couplings.abs()
                }
                (None, Some(p)) => {
                    log.input(p);
                    io::read_posterior(p)?.coupling_scores()
                }
                _ => return Err(invalid("give exactly one of --est and --posterior")),
            };
            let roc = coupling_roc(&truth.couplings, &scores, a.exclude_diagonal)?;
            let mut t = Table::new(&["threshold", "fpr", "tpr"]);
            for p in &roc.points {
                t.push(vec![p.threshold, p.fpr, p.tpr]);
            }
            println!("auc={}", roc.auc);
            write_table(&a.out, &t, log)
        }
    }
}

fn run_repro(a: &ReproArgs, log: &mut RunLog) -> kinising::Result<()> {
    let scale: Scale = a.scale.parse()?;
    std::fs::create_dir_all(&a.out_dir)?;
    let tables = match a.figure.as_str() {
        "fig1" => {
            let mut cfg = Fig1Config::at(scale);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            log.seeds.push(cfg.seed);
            run_fig1(&cfg)?.tables()
        }
        "fig2" => {
            let mut cfg = Fig2Config::at(scale);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            log.seeds.push(cfg.seed);
            run_fig2(&cfg)?.tables()
        }
        "fig3" => {
            let mut cfg = Fig3Config::at(scale);
            if let Some(s) = a.seed {
                cfg.seed = s;
                cfg.lif.seed = s;
            }
            log.seeds.push(cfg.seed);
            let r = run_fig3(&cfg)?;
            let spikes = a.out_dir.join("spikes.json");
            io::write_spikes(&spikes, &r.spikes)?;
            log.output(&spikes);
            let traj = a.out_dir.join("traj.json");
            io::write_trajectory(&traj, &r.data.trajectory, Some(cfg.gamma))?;
            log.output(&traj);
            let post = a.out_dir.join("posterior.json");
            io::write_posterior(&post, &r.posterior)?;
            log.output(&post);
            r.tables()
        }
        other => return Err(invalid(&format!("unknown figure '{other}', expected fig1, fig2 or fig3"))),
    };
    for (name, t) in tables {
        write_table(&a.out_dir.join(name), &t, log)?;
    }
    Ok(())
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Generate(_) => "generate",
        Command::LifSim(_) => "lif-sim",
        Command::FitEm(_) => "fit-em",
        Command::FitVb(_) => "fit-vb",
        Command::SweepLambda(_) => "sweep-lambda",
        Command::Eval(_) => "eval",
        Command::Repro(_) => "repro",
        Command::Replay(_) => "replay",
    }
}

fn execute(cli: &Cli, argv: &[String]) -> kinising::Result<()> {
    if let Command::Replay(r) = &cli.cmd {
        let m: Manifest = io::read_json(&r.manifest_path)?;
        let replayed = Cli::try_parse_from(&m.argv).map_err(|e| invalid(&first_line(&e.to_string())))?;
        if matches!(replayed.cmd, Command::Replay(_)) {
            return Err(invalid("a manifest cannot replay another replay"));
        }
        return execute(&replayed, &m.argv);
    }
    let start = Instant::now();
    let mut log = RunLog::default();
    match &cli.cmd {
        Command::Generate(a) => run_generate(a, &mut log)?,
        Command::LifSim(a) => run_lif(a, &mut log)?,
        Command::FitEm(a) => run_fit_em(a, &mut log)?,
        Command::FitVb(a) => run_fit_vb(a, &mut log)?,
        Command::SweepLambda(a) => run_sweep(a, &mut log)?,
        Command::Eval(e) => run_eval(e, &mut log)?,
        Command::Repro(a) => run_repro(a, &mut log)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    let path = match (&cli.manifest, &cli.cmd) {
        (Some(p), _) => p.clone(),
        (None, Command::Repro(a)) => a.out_dir.join("manifest.json"),
        (None, _) => {
            let first = log.outputs.first().cloned().unwrap_or_else(|| PathBuf::from("kinising"));
            let mut name = first.into_os_string();
            name.push(".manifest.json");
            PathBuf::from(name)
        }
    };
    let manifest = Manifest {
        subcommand: subcommand_name(&cli.cmd).to_string(),
        argv: argv.to_vec(),
        seeds: log.seeds,
        inputs: log.inputs,
        outputs: log.outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    io::write_json(&path, &manifest)
}

fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

fn setup_threads(flag: Option<usize>) -> kinising::Result<()> {
    let env = std::env::var("KINISING_THREADS").ok();
    let n = match (flag, env) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => Some(v.parse::<usize>().map_err(|_| invalid("KINISING_THREADS must be an integer"))?),
        (None, None) => None,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(&format!("cannot set up {n} threads: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: usage: {}", first_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let result = setup_threads(cli.threads).and_then(|_| execute(&cli, &argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
