//! Recurrent network of conductance-based leaky integrate-and-fire
//! neurons driven by Poisson input, and conversion of its spikes into
//! binary spin trajectories.
//!
//! Units inside the simulator are ms, mV, nS and pF; spike records and
//! trajectories are in seconds. Synapses are exponentially decaying
//! conductances with a fixed delay, `g(t) = g_syn exp(-t / tau)` after
//! arrival, excitatory ones reversing at `v_e`, inhibitory ones at `v_i`.
//! The membrane is integrated with forward Euler.
//!
//! Conductance means follow the target-source convention: `g_ei` is the
//! mean conductance of an I -> E synapse.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Flip, SpinTrajectory};
use crate::sampler::stream_rng;

const CONNECT_STREAM: u64 = 32;
const INPUT_STREAM: u64 = 33;
const VOLTAGE_STREAM: u64 = 34;
const RECORD_STREAM: u64 = 35;

/// Membrane potential magnitude treated as a diverged integration.
const V_BLOWUP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Population {
    X,
    E,
    I,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifConfig {
    pub n_x: usize,
    pub n_e: usize,
    pub n_i: usize,
    pub c_m: f64,
    pub g_l: f64,
    pub v_l: f64,
    pub v_th: f64,
    pub v_r: f64,
    pub t_ref_e: f64,
    pub t_ref_i: f64,
    /// Poisson rate of the input population in Hz.
    pub rate_x: f64,
    pub p_connect: f64,
    pub g_ee: f64,
    pub g_ei: f64,
    pub g_ie: f64,
    pub g_ii: f64,
    pub g_ex: f64,
    pub g_ix: f64,
    /// Multiplies every synaptic conductance.
    pub conductance_scale: f64,
    pub tau_e: f64,
    pub tau_i: f64,
    pub v_e: f64,
    pub v_i: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub dt: f64,
    /// Fixed initial potential; uniform in `[v_l, v_th)` when unset.
    pub v_init: Option<f64>,
    pub record_x: usize,
    pub record_e: usize,
    pub record_i: usize,
    /// Simulated time in seconds.
    pub t_end: f64,
    pub seed: u64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            n_x: 800,
            n_e: 800,
            n_i: 200,
            c_m: 250.0,
            g_l: 16.7,
            v_l: -70.0,
            v_th: -50.0,
            v_r: -60.0,
            t_ref_e: 2.0,
            t_ref_i: 1.0,
            rate_x: 10.0,
            p_connect: 0.2,
            g_ee: 2.4,
            g_ei: 40.0,
            g_ie: 4.8,
            g_ii: 40.0,
            g_ex: 5.4,
            g_ix: 5.4,
            conductance_scale: 1.0,
            tau_e: 5.0,
            tau_i: 10.0,
            v_e: 0.0,
            v_i: -80.0,
            delay_min: 0.5,
            delay_max: 1.5,
            dt: 0.05,
            v_init: None,
            record_x: 0,
            record_e: 100,
            record_i: 40,
            t_end: 1000.0,
            seed: 0,
        }
    }
}

impl LifConfig {
    /// Network scaled down to `(200, 200, 50)` neurons for quick runs.
    /// With a quarter of the inputs the full conductances let part of the
    /// network run away to hundreds of Hz; scaling them by 0.6 restores
    /// population rates close to those of the full network.
    pub fn desk() -> Self {
        Self { n_x: 200, n_e: 200, n_i: 50, conductance_scale: 0.6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_m", self.c_m),
            ("g_l", self.g_l),
            ("tau_e", self.tau_e),
            ("tau_i", self.tau_i),
            ("dt", self.dt),
            ("t_end", self.t_end),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let nonneg = [
            ("g_ee", self.g_ee),
            ("g_ei", self.g_ei),
            ("g_ie", self.g_ie),
            ("g_ii", self.g_ii),
            ("g_ex", self.g_ex),
            ("g_ix", self.g_ix),
            ("conductance_scale", self.conductance_scale),
            ("rate_x", self.rate_x),
            ("t_ref_e", self.t_ref_e),
            ("t_ref_i", self.t_ref_i),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(self.v_r < self.v_th) {
            return Err(Error::invalid("reset potential must lie below threshold"));
        }
        if !(0.0..=1.0).contains(&self.p_connect) {
            return Err(Error::invalid("p_connect must lie in [0, 1]"));
        }
        if !(self.delay_min > 0.0 && self.delay_min <= self.delay_max && self.delay_max.is_finite()) {
            return Err(Error::invalid("delays must satisfy 0 < delay_min <= delay_max"));
        }
        if self.record_x > self.n_x || self.record_e > self.n_e || self.record_i > self.n_i {
            return Err(Error::invalid("cannot record more neurons than a population holds"));
        }
        Ok(())
    }

    fn refractory(&self, pop: Population) -> f64 {
        if pop == Population::E {
            self.t_ref_e
        } else {
            self.t_ref_i
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedNeuron {
    pub pop: Population,
    /// Index within the whole network.
    pub id: usize,
    /// Spike times in seconds.
    pub times: Vec<f64>,
}

/// A synapse between two recorded neurons, as indices into
/// [`SpikeRecord::neurons`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedSynapse {
    pub pre: usize,
    pub post: usize,
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeRecord {
    pub t_end: f64,
    pub neurons: Vec<RecordedNeuron>,
    pub synapses: Vec<RecordedSynapse>,
}

#[derive(Clone, Copy, Debug)]
struct Synapse {
    /// Index among the E and I neurons.
    target: usize,
    g: f64,
    delay_steps: usize,
    inhibitory: bool,
}

pub struct LifNetwork {
    cfg: LifConfig,
    v: Vec<f64>,
    g_exc: Vec<f64>,
    g_inh: Vec<f64>,
    refractory_left: Vec<usize>,
    refractory_steps: Vec<usize>,
    /// Outgoing synapses of every neuron, X first, then E, then I.
    out: Vec<Vec<Synapse>>,
    ring_exc: Vec<Vec<f64>>,
    ring_inh: Vec<Vec<f64>>,
    /// Pre-drawn input spikes as (step, X index), in time order.
    input: Vec<(usize, usize)>,
    input_pos: usize,
    input_spikes: Vec<Vec<f64>>,
    spikes: Vec<Vec<f64>>,
    step: usize,
    decay_e: f64,
    decay_i: f64,
}

impl LifNetwork {
    pub fn new(cfg: &LifConfig) -> Result<Self> {
        cfg.validate()?;
        let n_rec = cfg.n_e + cfg.n_i;
        let n_all = cfg.n_x + n_rec;
        let pop_of = |k: usize| {
            if k < cfg.n_x {
                Population::X
            } else if k < cfg.n_x + cfg.n_e {
                Population::E
            } else {
                Population::I
            }
        };
        let mean_g = |post: Population, pre: Population| match (post, pre) {
            (Population::E, Population::E) => cfg.g_ee,
            (Population::E, Population::I) => cfg.g_ei,
            (Population::I, Population::E) => cfg.g_ie,
            (Population::I, Population::I) => cfg.g_ii,
            (Population::E, Population::X) => cfg.g_ex,
            (Population::I, Population::X) => cfg.g_ix,
            (Population::X, _) => 0.0,
        };
        let mut rng = stream_rng(cfg.seed, CONNECT_STREAM);
        let half_width = 0.5 * 3f64.sqrt();
        let mut out = vec![Vec::new(); n_all];
        for post in cfg.n_x..n_all {
            for (pre, syns) in out.iter_mut().enumerate() {
                let connect = rng.random::<f64>() < cfg.p_connect;
                let u: f64 = rng.random();
                let d: f64 = rng.random();
                if !connect || pre == post {
                    continue;
                }
                let m = mean_g(pop_of(post), pop_of(pre)) * cfg.conductance_scale;
                let delay = cfg.delay_min + d * (cfg.delay_max - cfg.delay_min);
                syns.push(Synapse {
                    target: post - cfg.n_x,
                    g: m * (1.0 - half_width + 2.0 * half_width * u),
                    delay_steps: ((delay / cfg.dt).round() as usize).max(1),
                    inhibitory: pop_of(pre) == Population::I,
                });
            }
        }
        let ring_len = (cfg.delay_max / cfg.dt).round() as usize + 2;

        let mut rng = stream_rng(cfg.seed, INPUT_STREAM);
        let t_end_ms = cfg.t_end * 1e3;
        let mut input_spikes = vec![Vec::new(); cfg.n_x];
        let mut input = Vec::new();
        if cfg.rate_x > 0.0 {
            let mean_isi = 1e3 / cfg.rate_x;
            for (x, times) in input_spikes.iter_mut().enumerate() {
                let mut t = 0.0;
                loop {
                    t += -(1.0 - rng.random::<f64>()).ln() * mean_isi;
                    if t >= t_end_ms {
                        break;
                    }
                    times.push(t * 1e-3);
                    input.push(((t / cfg.dt).floor() as usize, x));
                }
            }
        }
        input.sort_unstable();

        let mut rng = stream_rng(cfg.seed, VOLTAGE_STREAM);
        let v = (0..n_rec)
            .map(|_| {
                let u: f64 = rng.random();
                cfg.v_init.unwrap_or(cfg.v_l + u * (cfg.v_th - cfg.v_l))
            })
            .collect();
        let refractory_steps =
            (cfg.n_x..n_all).map(|k| (cfg.refractory(pop_of(k)) / cfg.dt).round() as usize).collect();
        Ok(Self {
            cfg: cfg.clone(),
            v,
            g_exc: vec![0.0; n_rec],
            g_inh: vec![0.0; n_rec],
            refractory_left: vec![0; n_rec],
            refractory_steps,
            out,
            ring_exc: vec![vec![0.0; n_rec]; ring_len],
            ring_inh: vec![vec![0.0; n_rec]; ring_len],
            input,
            input_pos: 0,
            input_spikes,
            spikes: vec![Vec::new(); n_rec],
            step: 0,
            decay_e: (-cfg.dt / cfg.tau_e).exp(),
            decay_i: (-cfg.dt / cfg.tau_i).exp(),
        })
    }

    /// Current time in ms.
    pub fn time_ms(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    /// Membrane potential of E/I neuron `k` (E first).
    pub fn voltage(&self, k: usize) -> f64 {
        self.v[k]
    }

    pub fn set_voltage(&mut self, k: usize, v: f64) {
        self.v[k] = v;
    }

    /// Spike times in seconds of E/I neuron `k`.
    pub fn spikes(&self, k: usize) -> &[f64] {
        &self.spikes[k]
    }

    /// Number of synapses onto E/I neuron `k` from network neuron `pre`.
    pub fn has_synapse(&self, pre: usize, post: usize) -> bool {
        self.out[pre].iter().any(|s| s.target == post)
    }

    fn emit(&mut self, pre: usize) {
        let len = self.ring_exc.len();
        for s in &self.out[pre] {
            let slot = (self.step + s.delay_steps) % len;
            if s.inhibitory {
                self.ring_inh[slot][s.target] += s.g;
            } else {
                self.ring_exc[slot][s.target] += s.g;
            }
        }
    }

    /// Advances by one time step.
    pub fn step(&mut self) -> Result<()> {
        while self.input_pos < self.input.len() && self.input[self.input_pos].0 <= self.step {
            let x = self.input[self.input_pos].1;
            self.emit(x);
            self.input_pos += 1;
        }
        let slot = self.step % self.ring_exc.len();
        let c = &self.cfg;
        let n_x = c.n_x;
        let mut fired = Vec::new();
        for k in 0..self.v.len() {
            self.g_exc[k] += std::mem::take(&mut self.ring_exc[slot][k]);
            self.g_inh[k] += std::mem::take(&mut self.ring_inh[slot][k]);
            if self.refractory_left[k] > 0 {
                self.refractory_left[k] -= 1;
                self.v[k] = c.v_r;
            } else {
                let v = self.v[k];
                let i_syn = -self.g_exc[k] * (v - c.v_e) - self.g_inh[k] * (v - c.v_i);
                let v = v + c.dt / c.c_m * (-c.g_l * (v - c.v_l) + i_syn);
                if !(v.abs() < V_BLOWUP) {
                    return Err(Error::numerical(format!(
                        "membrane potential diverged at t={} ms; use a smaller dt",
                        self.time_ms()
                    )));
                }
                if v >= c.v_th {
                    self.v[k] = c.v_r;
                    self.refractory_left[k] = self.refractory_steps[k];
                    fired.push(k);
                } else {
                    self.v[k] = v;
                }
            }
            self.g_exc[k] *= self.decay_e;
            self.g_inh[k] *= self.decay_i;
        }
        self.step += 1;
        let t_s = self.step as f64 * c.dt * 1e-3;
        for k in fired {
            self.spikes[k].push(t_s);
            self.emit(n_x + k);
        }
        Ok(())
    }

    /// Runs to `t_end` and returns the recorded subpopulation.
    pub fn run(mut self) -> Result<SpikeRecord> {
        let n_steps = (self.cfg.t_end * 1e3 / self.cfg.dt).round() as usize;
        while self.step < n_steps {
            self.step()?;
        }
        Ok(self.record())
    }

    fn record(self) -> SpikeRecord {
        let c = &self.cfg;
        let mut rng = stream_rng(c.seed, RECORD_STREAM);
        let mut chosen: Vec<usize> = Vec::new();
        chosen.extend(pick(&mut rng, 0, c.n_x, c.record_x));
        chosen.extend(pick(&mut rng, c.n_x, c.n_e, c.record_e));
        chosen.extend(pick(&mut rng, c.n_x + c.n_e, c.n_i, c.record_i));
        let neurons: Vec<RecordedNeuron> = chosen
            .iter()
            .map(|&id| {
                let (pop, times) = if id < c.n_x {
                    (Population::X, self.input_spikes[id].clone())
                } else if id < c.n_x + c.n_e {
                    (Population::E, self.spikes[id - c.n_x].clone())
                } else {
                    (Population::I, self.spikes[id - c.n_x].clone())
                };
                RecordedNeuron { pop, id, times }
            })
            .collect();
        let mut synapses = Vec::new();
        for (pre, &pre_id) in chosen.iter().enumerate() {
            for s in &self.out[pre_id] {
                if let Some(post) = chosen.iter().position(|&id| id == s.target + c.n_x) {
                    synapses.push(RecordedSynapse { pre, post, g: s.g });
                }
            }
        }
        synapses.sort_by(|a, b| (a.pre, a.post).cmp(&(b.pre, b.post)));
        SpikeRecord { t_end: c.t_end, neurons, synapses }
    }
}

/// `k` distinct indices from `start..start + n`, in increasing order.
fn pick(rng: &mut ChaCha8Rng, start: usize, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, n, k).into_iter().map(|i| start + i).collect();
    idx.sort_unstable();
    idx
}

pub fn lif_simulate(cfg: &LifConfig) -> Result<SpikeRecord> {
    LifNetwork::new(cfg)?.run()
}

/// Binarized data together with its ground-truth synapse matrix.
#[derive(Clone, Debug)]
pub struct BinarizedData {
    pub trajectory: SpinTrajectory,
    /// Record indices of the kept neurons, in spin order.
    pub kept: Vec<usize>,
    /// `synapses[(i, j)]` is true when kept neuron `j` projects onto `i`.
    pub synapses: nalgebra::DMatrix<bool>,
}

/// Keeps the `n_e_keep` excitatory and `n_i_keep` inhibitory neurons with
/// the highest spike counts and marks each as active (`+1`) for
/// `active_ms` after every spike.
pub fn select_and_binarize(rec: &SpikeRecord, n_e_keep: usize, n_i_keep: usize, active_ms: f64) -> Result<BinarizedData> {
    if rec.neurons.iter().all(|n| n.times.is_empty()) {
        return Err(Error::invalid("spike record contains no spikes"));
    }
    if !(active_ms > 0.0) {
        return Err(Error::invalid("active window must be positive"));
    }
    let top = |pop: Population, k: usize| -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = (0..rec.neurons.len()).filter(|&i| rec.neurons[i].pop == pop).collect();
        if idx.len() < k {
            return Err(Error::invalid(format!("only {} {pop:?} neurons recorded, {k} requested", idx.len())));
        }
        idx.sort_by(|&a, &b| rec.neurons[b].times.len().cmp(&rec.neurons[a].times.len()).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    };
    let mut kept = top(Population::E, n_e_keep)?;
    kept.extend(top(Population::I, n_i_keep)?);
    if kept.is_empty() {
        return Err(Error::invalid("no neurons selected"));
    }
    let window = active_ms * 1e-3;
    let mut initial = Vec::with_capacity(kept.len());
    let mut flips = Vec::new();
    for (spin, &r) in kept.iter().enumerate() {
        let mut windows: Vec<(f64, f64)> = Vec::new();
        for &t in &rec.neurons[r].times {
            match windows.last_mut() {
                Some(w) if t <= w.1 => w.1 = t + window,
                _ => windows.push((t, t + window)),
            }
        }
        let starts_on = windows.first().is_some_and(|w| w.0 <= 0.0);
        initial.push(if starts_on { 1 } else { -1 });
        let events = windows.iter().flat_map(|&(a, b)| [a, b]).skip(usize::from(starts_on));
        flips.extend(events.into_iter().filter(|&t| t < rec.t_end).map(|t| Flip { t, i: spin }));
    }
    let trajectory = SpinTrajectory::with_jittered_ties(rec.t_end, initial, flips)?;
    let n = kept.len();
    let mut synapses = nalgebra::DMatrix::from_element(n, n, false);
    for s in &rec.synapses {
        if let (Some(i), Some(j)) = (kept.iter().position(|&k| k == s.post), kept.iter().position(|&k| k == s.pre)) {
            synapses[(i, j)] = true;
        }
    }
    Ok(BinarizedData { trajectory, kept, synapses })
}
