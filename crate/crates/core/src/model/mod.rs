//! Data and parameter containers plus exact evaluation of the smoothed and
//! unsmoothed criteria for the continuous and binary change-plane models.
//!
//! Parameters follow the identifiability convention that the first
//! coordinate of the plane normal `ψ` is fixed to 1; only the remaining
//! coordinates `ψ̃` are free.

mod binary;
mod continuous;

pub use binary::{hessian_binary, loss_smoothed_binary, loss_unsmoothed_binary, score_binary};
pub use continuous::{
    grad_smoothed_continuous, hessian_smoothed_continuous, loss_smoothed_continuous,
    loss_smoothed_continuous_mixture, loss_unsmoothed_continuous, per_observation_gradients,
    ContinuousGradient,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::compensated_sum;

/// Above this many rows sums are accumulated with compensation.
pub const COMPENSATED_SUM_THRESHOLD: usize = 100_000;

pub(crate) fn sum_rows<F: Fn(usize) -> f64>(n: usize, term: F) -> f64 {
    if n >= COMPENSATED_SUM_THRESHOLD {
        compensated_sum((0..n).map(term))
    } else {
        (0..n).map(term).sum()
    }
}

#[inline]
pub(crate) fn row_dot(m: &DMatrix<f64>, i: usize, v: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        s += m[(i, j)] * v[j];
    }
    s
}

/// `q_iᵀψ` with `ψ = (1, ψ̃)`.
#[inline]
pub(crate) fn plane_index(q: &DMatrix<f64>, i: usize, psi_tilde: &DVector<f64>) -> f64 {
    let mut s = q[(i, 0)];
    for j in 1..q.ncols() {
        s += q[(i, j)] * psi_tilde[j - 1];
    }
    s
}

fn all_finite<'a, I: IntoIterator<Item = &'a f64>>(it: I) -> bool {
    it.into_iter().all(|v| v.is_finite())
}

/// Continuous-response sample `(y, X, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousDataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl ContinuousDataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let (p, d) = (x.ncols(), q.ncols());
        if n == 0 || p == 0 || d == 0 {
            return Err(Error::shape(format!(
                "empty dataset dimension (n = {n}, p = {p}, d = {d})"
            )));
        }
        if x.nrows() != n || q.nrows() != n {
            return Err(Error::shape(format!(
                "row counts differ: y has {n}, X has {}, Q has {}",
                x.nrows(),
                q.nrows()
            )));
        }
        if n < 2 * p + d {
            return Err(Error::shape(format!(
                "need n >= 2p + d, got n = {n}, p = {p}, d = {d}"
            )));
        }
        if !all_finite(y.iter().chain(x.iter()).chain(q.iter())) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(ContinuousDataset { y, x, q })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.q.ncols()
    }

    /// Returns a copy with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        ContinuousDataset {
            y: DVector::from_fn(self.n(), |i, _| self.y[perm[i]]),
            x: self.x.select_rows(perm),
            q: self.q.select_rows(perm),
        }
    }

    /// Returns a copy with every entry of `Q` multiplied by `c`.
    pub fn with_scaled_q(&self, c: f64) -> Self {
        ContinuousDataset {
            y: self.y.clone(),
            x: self.x.clone(),
            q: &self.q * c,
        }
    }

    pub(crate) fn check_theta(&self, theta: &ThetaContinuous) -> Result<()> {
        let (p, d) = (self.p(), self.d());
        if theta.beta.len() != p || theta.delta.len() != p || theta.psi_tilde.len() + 1 != d {
            return Err(Error::shape(format!(
                "theta has (beta {}, delta {}, psi_tilde {}), data needs ({p}, {p}, {})",
                theta.beta.len(),
                theta.delta.len(),
                theta.psi_tilde.len(),
                d - 1
            )));
        }
        Ok(())
    }
}

/// Binary-response sample `(y, Q)` with `y_i ∈ {0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataset {
    y: DVector<f64>,
    q: DMatrix<f64>,
}

impl BinaryDataset {
    pub fn new(y: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let d = q.ncols();
        if n == 0 || d == 0 {
            return Err(Error::shape(format!("empty dataset (n = {n}, d = {d})")));
        }
        if q.nrows() != n {
            return Err(Error::shape(format!(
                "row counts differ: y has {n}, Q has {}",
                q.nrows()
            )));
        }
        if n < d {
            return Err(Error::shape(format!("need n >= d, got n = {n}, d = {d}")));
        }
        if !all_finite(q.iter()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("binary response must be 0 or 1, got {bad}")));
        }
        Ok(BinaryDataset { y, q })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.q.ncols()
    }

    pub fn mean_response(&self) -> f64 {
        self.y.sum() / self.n() as f64
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        BinaryDataset {
            y: DVector::from_fn(self.n(), |i, _| self.y[perm[i]]),
            q: self.q.select_rows(perm),
        }
    }

    pub fn with_scaled_q(&self, c: f64) -> Self {
        BinaryDataset {
            y: self.y.clone(),
            q: &self.q * c,
        }
    }

    /// Labels mapped `y ↦ 1 - y`.
    pub fn flipped(&self) -> Self {
        BinaryDataset {
            y: self.y.map(|v| 1.0 - v),
            q: self.q.clone(),
        }
    }

    /// Rows `range` as a new dataset.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = range.collect();
        BinaryDataset::new(
            DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]),
            self.q.select_rows(&idx),
        )
    }

    pub(crate) fn check_psi(&self, psi_tilde: &DVector<f64>) -> Result<()> {
        if psi_tilde.len() + 1 != self.d() {
            return Err(Error::shape(format!(
                "psi_tilde has length {}, data needs {}",
                psi_tilde.len(),
                self.d() - 1
            )));
        }
        Ok(())
    }
}

/// `(β, δ, ψ̃)` for the continuous model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaContinuous {
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    pub psi_tilde: DVector<f64>,
}

impl ThetaContinuous {
    pub fn new(beta: Vec<f64>, delta: Vec<f64>, psi_tilde: Vec<f64>) -> Self {
        ThetaContinuous {
            beta: DVector::from_vec(beta),
            delta: DVector::from_vec(delta),
            psi_tilde: DVector::from_vec(psi_tilde),
        }
    }

    /// Full plane normal `(1, ψ̃)`.
    pub fn psi(&self) -> DVector<f64> {
        full_psi(&self.psi_tilde)
    }

    /// `(β, δ, ψ̃)` stacked into one vector.
    pub fn stacked(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .beta
            .iter()
            .chain(self.delta.iter())
            .chain(self.psi_tilde.iter())
            .copied()
            .collect();
        DVector::from_vec(v)
    }

    /// Inverse of [`stacked`](Self::stacked) for regression dimension `p`.
    pub fn from_stacked(v: &DVector<f64>, p: usize) -> Self {
        ThetaContinuous {
            beta: v.rows(0, p).into_owned(),
            delta: v.rows(p, p).into_owned(),
            psi_tilde: v.rows(2 * p, v.len() - 2 * p).into_owned(),
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + self.delta.len() + self.psi_tilde.len()
    }
}

/// `(ψ̃, γ)` for the binary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiBinary {
    pub psi_tilde: DVector<f64>,
    pub gamma: f64,
}

impl PsiBinary {
    pub fn new(psi_tilde: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        Ok(PsiBinary {
            psi_tilde: DVector::from_vec(psi_tilde),
            gamma,
        })
    }

    pub fn psi(&self) -> DVector<f64> {
        full_psi(&self.psi_tilde)
    }
}

pub(crate) fn full_psi(psi_tilde: &DVector<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(psi_tilde.len() + 1);
    v.push(1.0);
    v.extend(psi_tilde.iter().copied());
    DVector::from_vec(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BandwidthSource {
    Explicit,
    /// `σ = n^(-a)`.
    Exponent(f64),
}

/// Smoothing scale `σ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    sigma: f64,
    source: BandwidthSource,
}

impl Bandwidth {
    pub fn explicit(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
        }
        Ok(Bandwidth {
            sigma,
            source: BandwidthSource::Explicit,
        })
    }

    /// `σ = n^(-a)` with `0.5 < a < 1`, the regime `nσ → ∞`, `nσ² → 0`.
    pub fn from_exponent(n: usize, a: f64) -> Result<Self> {
        if !(a > 0.5 && a < 1.0) {
            return Err(Error::invalid(format!(
                "bandwidth exponent must lie in (0.5, 1), got {a}"
            )));
        }
        if n == 0 {
            return Err(Error::invalid("bandwidth exponent needs n >= 1"));
        }
        Ok(Bandwidth {
            sigma: (n as f64).powf(-a),
            source: BandwidthSource::Exponent(a),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn source(&self) -> BandwidthSource {
        self.source
    }

    /// Bandwidth multiplied by `factor`; the result is recorded as explicit.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Bandwidth::explicit(self.sigma * factor)
    }
}
