//! JSON and CSV formats.
//!
//! ```text
//! trajectory  {"n_spins", "t_end", "gamma": f64|null, "initial_state": [+-1], "flips": [{"t", "i"}]}
//! model       {"theta": [..], "J": [[row], ..], "gamma"}
//! posterior   {"rows": [{"mu": [..], "sigma": [[..], ..]}]}
//! spikes      {"t_end", "neurons": [{"pop", "id", "times"}], "synapses": [{"pre", "post", "g"}]}
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! written file gives back the same values bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::SpikeRecord;
use crate::model::{Flip, IsingModel, Spin, SpinTrajectory};
use crate::vb::{RowPosterior, RowPosteriorSet};

#[derive(Serialize, Deserialize)]
struct FlipJson {
    t: f64,
    i: usize,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    n_spins: usize,
    t_end: f64,
    gamma: Option<f64>,
    initial_state: Vec<Spin>,
    flips: Vec<FlipJson>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    theta: Vec<f64>,
    #[serde(rename = "J")]
    j: Vec<Vec<f64>>,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct RowJson {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorJson {
    rows: Vec<RowJson>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(n, d, |r, c| rows[r][c]))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

pub fn trajectory_to_json(traj: &SpinTrajectory, gamma: Option<f64>) -> serde_json::Value {
    let j = TrajectoryJson {
        n_spins: traj.n_spins(),
        t_end: traj.t_end(),
        gamma,
        initial_state: traj.initial_state().to_vec(),
        flips: traj.flips().iter().map(|f| FlipJson { t: f.t, i: f.i }).collect(),
    };
    serde_json::to_value(j).expect("trajectory serializes")
}

/// Parses a trajectory and the update rate stored with it, if any.
pub fn trajectory_from_json(v: serde_json::Value) -> Result<(SpinTrajectory, Option<f64>)> {
    let j: TrajectoryJson = serde_json::from_value(v)?;
    if j.initial_state.len() != j.n_spins {
        return Err(Error::invalid("n_spins does not match the initial state"));
    }
    let flips = j.flips.into_iter().map(|f| Flip { t: f.t, i: f.i }).collect();
    Ok((SpinTrajectory::new(j.t_end, j.initial_state, flips)?, j.gamma))
}

pub fn write_trajectory(path: &Path, traj: &SpinTrajectory, gamma: Option<f64>) -> Result<()> {
    write_json(path, &trajectory_to_json(traj, gamma))
}

pub fn read_trajectory(path: &Path) -> Result<(SpinTrajectory, Option<f64>)> {
    trajectory_from_json(read_json(path)?)
}

pub fn model_to_json(model: &IsingModel) -> serde_json::Value {
    let j = ModelJson { theta: model.fields.iter().copied().collect(), j: rows_of(&model.couplings), gamma: model.gamma };
    serde_json::to_value(j).expect("model serializes")
}

pub fn model_from_json(v: serde_json::Value) -> Result<IsingModel> {
    let j: ModelJson = serde_json::from_value(v)?;
    let couplings = matrix_from_rows(&j.j, "J")?;
    IsingModel::new(couplings, DVector::from_vec(j.theta), j.gamma)
}

pub fn write_model(path: &Path, model: &IsingModel) -> Result<()> {
    write_json(path, &model_to_json(model))
}

pub fn read_model(path: &Path) -> Result<IsingModel> {
    model_from_json(read_json(path)?)
}

pub fn posterior_to_json(post: &RowPosteriorSet) -> serde_json::Value {
    let rows = post
        .rows
        .iter()
        .map(|r| RowJson { mu: r.mean.iter().copied().collect(), sigma: rows_of(&r.cov) })
        .collect();
    serde_json::to_value(PosteriorJson { rows }).expect("posterior serializes")
}

pub fn posterior_from_json(v: serde_json::Value) -> Result<RowPosteriorSet> {
    let j: PosteriorJson = serde_json::from_value(v)?;
    let rows: Result<Vec<RowPosterior>> = j
        .rows
        .into_iter()
        .map(|r| Ok(RowPosterior { mean: DVector::from_vec(r.mu), cov: matrix_from_rows(&r.sigma, "sigma")? }))
        .collect();
    let post = RowPosteriorSet { rows: rows? };
    post.validate()?;
    Ok(post)
}

pub fn write_posterior(path: &Path, post: &RowPosteriorSet) -> Result<()> {
    write_json(path, &posterior_to_json(post))
}

pub fn read_posterior(path: &Path) -> Result<RowPosteriorSet> {
    posterior_from_json(read_json(path)?)
}

pub fn write_spikes(path: &Path, rec: &SpikeRecord) -> Result<()> {
    write_json(path, rec)
}

pub fn read_spikes(path: &Path) -> Result<SpikeRecord> {
    let rec: SpikeRecord = read_json(path)?;
    for (k, n) in rec.neurons.iter().enumerate() {
        if n.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!("spike times of neuron {k} are not increasing")));
        }
    }
    if rec.synapses.iter().any(|s| s.pre >= rec.neurons.len() || s.post >= rec.neurons.len()) {
        return Err(Error::invalid("synapse refers to an unknown neuron"));
    }
    Ok(rec)
}

/// Header plus rows of numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        // Debug switches to exponent form for very small or large magnitudes
        format!("{v:?}")
    }
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| fmt_value(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::invalid(format!("bad number in {}: {e}", path.display())))?);
    }
    Ok(Table { header, rows })
}
