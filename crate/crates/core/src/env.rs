//! The interference-channel power-control problem: random channel gains, local
//! observations, and the sum-rate / sum energy-efficiency utilities.
//!
//! Gains are stored as an `N × N` matrix with `a[j][i]` the linear power gain
//! from EN `j` to user `i`; EN `i` observes column `i`. Rates are in nats and
//! the receiver noise power is normalized to one.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_POWER_BUDGET: f64 = 10.0;
pub const DEFAULT_STATIC_POWER: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    gains: Array2<f64>,
}

impl NetworkState {
    pub fn new(gains: Array2<f64>) -> Result<Self> {
        let (rows, cols) = gains.dim();
        if rows != cols || rows == 0 {
            return Err(Error::config(format!("gain matrix must be square and non-empty, got {rows}x{cols}")));
        }
        if let Some(bad) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::numeric("NetworkState", format!("gain {bad} is not finite and non-negative")));
        }
        Ok(Self { gains })
    }

    /// Builds a state from `N²` gains in row-major order (`a[j][i]` at `j·N + i`).
    pub fn from_row_major(n: usize, values: Vec<f64>) -> Result<Self> {
        let gains = Array2::from_shape_vec((n, n), values)
            .map_err(|e| Error::config(format!("gain vector does not form an {n}x{n} matrix: {e}")))?;
        Self::new(gains)
    }

    pub fn size(&self) -> usize {
        self.gains.nrows()
    }

    /// Gain from EN `from` to user `to`.
    pub fn gain(&self, from: usize, to: usize) -> f64 {
        self.gains[[from, to]]
    }

    pub fn gains(&self) -> &Array2<f64> {
        &self.gains
    }

    pub fn local_observation(&self, i: usize) -> Result<LocalObservation> {
        let n = self.size();
        if i >= n {
            return Err(Error::Index { index: i, size: n });
        }
        Ok(LocalObservation {
            owner: i,
            gains: self.gains.column(i).to_owned(),
        })
    }

    /// Inverse of [`local_observation`](Self::local_observation) over all ENs.
    pub fn from_observations(observations: &[LocalObservation]) -> Result<Self> {
        let n = observations.len();
        let mut gains = Array2::zeros((n, n));
        for obs in observations {
            if obs.owner >= n || obs.gains.len() != n {
                return Err(Error::config("observation set is not a full column partition"));
            }
            gains.column_mut(obs.owner).assign(&obs.gains);
        }
        Self::new(gains)
    }
}

/// All gains into user `owner`: `(a[0][i], …, a[N-1][i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObservation {
    pub owner: usize,
    pub gains: Array1<f64>,
}

/// Transmit powers, each in `[0, budget]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVector {
    values: Vec<f64>,
    budget: f64,
}

impl PowerVector {
    pub fn new(values: Vec<f64>, budget: f64) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= budget)) {
            return Err(Error::numeric("PowerVector", format!("power {v} outside [0, {budget}]")));
        }
        Ok(Self { values, budget })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UtilityKind {
    /// Σ rᵢ
    SumRate,
    /// Σ rᵢ / (xᵢ + P_S)
    EnergyEfficiency { static_power: f64 },
}

impl UtilityKind {
    pub fn energy_efficiency() -> Self {
        UtilityKind::EnergyEfficiency {
            static_power: DEFAULT_STATIC_POWER,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            UtilityKind::EnergyEfficiency { static_power } if !(static_power > 0.0) => {
                Err(Error::config("energy efficiency needs static power > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            UtilityKind::SumRate => "srmax",
            UtilityKind::EnergyEfficiency { .. } => "eemax",
        }
    }
}

/// `count` states of `n` ENs with i.i.d. unit-mean exponential gains.
pub fn sample_batch<R: Rng + ?Sized>(count: usize, n: usize, rng: &mut R) -> Vec<NetworkState> {
    (0..count)
        .map(|_| NetworkState {
            gains: Array2::from_shape_simple_fn((n, n), || Exp1.sample(rng)),
        })
        .collect()
}

/// `rᵢ = ln(1 + a_ii xᵢ / (1 + Σ_{j≠i} a_ji xⱼ))` in nats.
pub fn user_rate(a: &NetworkState, x: &[f64], i: usize) -> f64 {
    let interference = 1.0 + (0..a.size()).filter(|&j| j != i).map(|j| a.gain(j, i) * x[j]).sum::<f64>();
    (a.gain(i, i) * x[i] / interference).ln_1p()
}

pub fn sum_utility(kind: UtilityKind, a: &NetworkState, x: &[f64]) -> f64 {
    utility_and_gradient(kind, a, x, false).0
}

/// Utility and its gradient with respect to the powers.
pub fn utility_gradient(kind: UtilityKind, a: &NetworkState, x: &[f64]) -> (f64, Vec<f64>) {
    utility_and_gradient(kind, a, x, true)
}

fn utility_and_gradient(kind: UtilityKind, a: &NetworkState, x: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    let n = a.size();
    assert_eq!(x.len(), n, "power vector length must equal network size");
    let g = a.gains();
    let mut value = 0.0;
    let mut grad = if with_grad { vec![0.0; n] } else { Vec::new() };
    for i in 0..n {
        // total received power (plus unit noise) and interference-plus-noise at user i
        let mut total = 1.0;
        for j in 0..n {
            total += g[[j, i]] * x[j];
        }
        let signal = g[[i, i]] * x[i];
        let interference = total - signal;
        let rate = (signal / interference).ln_1p();
        let weight = match kind {
            UtilityKind::SumRate => 1.0,
            UtilityKind::EnergyEfficiency { static_power } => 1.0 / (x[i] + static_power),
        };
        value += rate * weight;
        if with_grad {
            let inv_total = 1.0 / total;
            let inv_interf = 1.0 / interference;
            for (k, gk) in grad.iter_mut().enumerate() {
                let d = if k == i {
                    g[[k, i]] * inv_total
                } else {
                    g[[k, i]] * (inv_total - inv_interf)
                };
                *gk += weight * d;
            }
            if let UtilityKind::EnergyEfficiency { .. } = kind {
                grad[i] -= rate * weight * weight;
            }
        }
    }
    (value, grad)
}

/// Per-sample utilities of a `batch × N` power tensor as a differentiable
/// `batch × 1` node.
pub fn utility_node(tape: &mut Tape, powers: Var, batch: &[NetworkState], kind: UtilityKind) -> Result<Var> {
    let x = tape.value(powers);
    let (rows, n) = x.dim();
    if rows != batch.len() {
        return Err(Error::config(format!("{rows} power rows for {} channel states", batch.len())));
    }
    let mut values = Array1::zeros(rows);
    let mut grads = Array2::zeros((rows, n));
    for (b, state) in batch.iter().enumerate() {
        if state.size() != n {
            return Err(Error::config(format!("state of size {} with {n} powers", state.size())));
        }
        let row = x.row(b);
        let (v, g) = utility_gradient(kind, state, row.as_slice().expect("contiguous rows"));
        values[b] = v;
        grads.row_mut(b).assign(&Array1::from(g));
    }
    tape.row_scalar(powers, values, grads)
}

fn csv_header(n: usize) -> Vec<String> {
    (0..n).flat_map(|j| (0..n).map(move |i| format!("a{j}_{i}"))).collect()
}

/// One row per state, gains in row-major order, with an `a{j}_{i}` header.
pub fn write_batch_csv<W: Write>(out: W, batch: &[NetworkState]) -> Result<()> {
    let n = batch.first().map_or(0, NetworkState::size);
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(csv_header(n))?;
    for state in batch {
        if state.size() != n {
            return Err(Error::config("mixed network sizes in one batch"));
        }
        writer.write_record(state.gains.iter().map(|v| format!("{v:?}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_batch_csv<R: Read>(input: R) -> Result<Vec<NetworkState>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let cols = header.len();
    let n = (cols as f64).sqrt().round() as usize;
    if n * n != cols || n == 0 {
        return Err(Error::Format(format!("{cols} columns is not a square gain matrix")));
    }
    let expected = csv_header(n);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!("unexpected channel CSV header {header:?}")));
    }
    let mut batch = Vec::new();
    for record in reader.records() {
        let record = record?;
        let values = record
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad gain {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        batch.push(NetworkState::from_row_major(n, values)?);
    }
    Ok(batch)
}
