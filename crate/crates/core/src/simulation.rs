//! Data generators, the Monte-Carlo harness and its diagnostics.
//!
//! Replication `r` draws its data from `child_seed(seed, r)` only, so a
//! replication's dataset does not depend on how many replications run.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_binary, fit_continuous, FitOptions};
use crate::inference::{infer_binary, infer_continuous};
use crate::model::{plane_index, Bandwidth, BinaryDataset, ContinuousDataset};
use crate::numerics::{cdf, normal_quantile};

/// Largest tolerated fraction of flagged replications.
pub const MAX_FLAGGED_FRACTION: f64 = 0.2;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` under master seed `seed`.
pub fn child_seed(seed: u64, rep: u64) -> u64 {
    splitmix64(seed ^ splitmix64(rep.wrapping_add(1)))
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    // Row-major draw order so that row i depends only on the first i rows of
    // the stream.
    let mut m = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Binary design: `Q` rows iid `N(0, I_d)`, `P(y = 1) = α₀` when
/// `qᵀψ₀ ≤ 0` and `β₀` otherwise, `ψ₀ = (1, ψ̃₀)`.
pub fn gen_binary(n: usize, d: usize, psi_tilde0: &[f64], alpha0: f64, beta0: f64, seed: u64) -> Result<BinaryDataset> {
    if psi_tilde0.len() + 1 != d {
        return Err(Error::shape(format!(
            "psi_tilde0 has length {}, expected d - 1 = {}",
            psi_tilde0.len(),
            d.saturating_sub(1)
        )));
    }
    for (name, v) in [("alpha0", alpha0), ("beta0", beta0)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = normal_matrix(&mut rng, n, d);
    let psi = DVector::from_column_slice(psi_tilde0);
    let y = DVector::from_fn(n, |i, _| {
        let prob = if plane_index(&q, i, &psi) > 0.0 { beta0 } else { alpha0 };
        if rng.gen::<f64>() < prob {
            1.0
        } else {
            0.0
        }
    });
    BinaryDataset::new(y, q)
}

/// Continuous design: `X`, `Q` iid standard normal,
/// `y = Xβ₀ + Xδ₀·1{Qψ₀ > 0} + noise_sd·ε`.
#[allow(clippy::too_many_arguments)]
pub fn gen_continuous(
    n: usize,
    p: usize,
    d: usize,
    beta0: &[f64],
    delta0: &[f64],
    psi_tilde0: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<ContinuousDataset> {
    if beta0.len() != p || delta0.len() != p || psi_tilde0.len() + 1 != d {
        return Err(Error::shape(format!(
            "true parameters have lengths ({}, {}, {}), expected ({p}, {p}, {})",
            beta0.len(),
            delta0.len(),
            psi_tilde0.len(),
            d.saturating_sub(1)
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(&mut rng, n, p);
    let q = normal_matrix(&mut rng, n, d);
    let psi = DVector::from_column_slice(psi_tilde0);
    let y = DVector::from_fn(n, |i, _| {
        let on = plane_index(&q, i, &psi) > 0.0;
        let mut v = 0.0;
        for j in 0..p {
            v += x[(i, j)] * (beta0[j] + if on { delta0[j] } else { 0.0 });
        }
        let e: f64 = rng.sample(StandardNormal);
        v + noise_sd * e
    });
    ContinuousDataset::new(y, x, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Continuous,
    Binary,
}

/// How `γ` is set in each binary replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Label mean of the whole sample.
    #[default]
    Mean,
    /// Label mean of the first half; `ψ̃` is fitted on the second half.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthSpec {
    Sigma(f64),
    /// `σ = n^(-a)`.
    Exponent(f64),
    /// One run per exponent (sweeps only).
    Exponents(Vec<f64>),
}

/// True parameters. Continuous runs use `beta`, `delta` (default all ones)
/// and `psi_tilde`; binary runs use `psi_tilde`, `alpha0` and `beta0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueParams {
    pub psi_tilde: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
}

fn default_ci_level() -> f64 {
    0.95
}

/// Monte-Carlo configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCConfig {
    pub model: ModelKind,
    pub n: usize,
    /// Regression dimension (continuous). For binary runs it may be given
    /// as the dimension of `Q` and must then equal `d`.
    #[serde(default)]
    pub p: Option<usize>,
    /// Dimension of `Q`.
    pub d: usize,
    pub true_params: TrueParams,
    #[serde(default)]
    pub noise_sd: Option<f64>,
    pub bandwidth: BandwidthSpec,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub gamma: GammaMode,
    #[serde(default)]
    pub fit: FitOptions,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl MCConfig {
    /// Parses and validates a JSON configuration; errors name the offending
    /// field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: MCConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(config_err("reps", "must be >= 2"));
        }
        if self.n < 10 {
            return Err(config_err("n", "must be >= 10"));
        }
        if self.d < 1 {
            return Err(config_err("d", "must be >= 1"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(config_err("ci_level", "must lie in (0, 1)"));
        }
        if self.true_params.psi_tilde.len() + 1 != self.d {
            return Err(config_err(
                "true_params.psi_tilde",
                format!("length must be d - 1 = {}", self.d - 1),
            ));
        }
        self.fit
            .validate()
            .map_err(|e| config_err("fit", e.to_string()))?;
        match &self.bandwidth {
            BandwidthSpec::Sigma(s) if !(*s > 0.0 && s.is_finite()) => {
                return Err(config_err("bandwidth.sigma", "must be positive"));
            }
            BandwidthSpec::Exponent(a) if !(*a > 0.5 && *a < 1.0) => {
                return Err(config_err("bandwidth.exponent", "must lie in (0.5, 1)"));
            }
            BandwidthSpec::Exponents(list) => {
                if list.is_empty() {
                    return Err(config_err("bandwidth.exponents", "must not be empty"));
                }
                if let Some(i) = list.iter().position(|a| !(*a > 0.5 && *a < 1.0)) {
                    return Err(config_err(&format!("bandwidth.exponents[{i}]"), "must lie in (0.5, 1)"));
                }
            }
            _ => {}
        }
        let tp = &self.true_params;
        match self.model {
            ModelKind::Continuous => {
                let p = self.p.ok_or_else(|| config_err("p", "required for the continuous model"))?;
                if p < 1 {
                    return Err(config_err("p", "must be >= 1"));
                }
                for (name, v) in [("true_params.beta", &tp.beta), ("true_params.delta", &tp.delta)] {
                    if let Some(v) = v {
                        if v.len() != p {
                            return Err(config_err(name, format!("length must be p = {p}")));
                        }
                    }
                }
                if tp.alpha0.is_some() || tp.beta0.is_some() {
                    return Err(config_err(
                        "true_params",
                        "alpha0/beta0 apply to the binary model only",
                    ));
                }
                if let Some(s) = self.noise_sd {
                    if !(s >= 0.0 && s.is_finite()) {
                        return Err(config_err("noise_sd", "must be >= 0"));
                    }
                }
                if self.n < 2 * p + self.d {
                    return Err(config_err("n", "must be >= 2p + d"));
                }
            }
            ModelKind::Binary => {
                if let Some(p) = self.p {
                    if p != self.d {
                        return Err(config_err("p", "for the binary model p is the dimension of Q and must equal d"));
                    }
                }
                if tp.beta.is_some() || tp.delta.is_some() {
                    return Err(config_err(
                        "true_params",
                        "beta/delta apply to the continuous model only",
                    ));
                }
                let a = tp.alpha0.ok_or_else(|| config_err("true_params.alpha0", "required"))?;
                let b = tp.beta0.ok_or_else(|| config_err("true_params.beta0", "required"))?;
                if !(0.0 < a && a < b && b < 1.0) {
                    return Err(config_err("true_params", "need 0 < alpha0 < beta0 < 1"));
                }
                if self.noise_sd.is_some() {
                    return Err(config_err("noise_sd", "applies to the continuous model only"));
                }
            }
        }
        Ok(())
    }

    fn regression_dim(&self) -> usize {
        self.p.unwrap_or(0)
    }

    fn beta0(&self) -> Vec<f64> {
        self.true_params
            .beta
            .clone()
            .unwrap_or_else(|| vec![1.0; self.regression_dim()])
    }

    fn delta0(&self) -> Vec<f64> {
        self.true_params
            .delta
            .clone()
            .unwrap_or_else(|| vec![1.0; self.regression_dim()])
    }

    /// Coordinate labels in estimate order.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.model == ModelKind::Continuous {
            let p = self.regression_dim();
            out.extend((1..=p).map(|j| format!("beta_{j}")));
            out.extend((1..=p).map(|j| format!("delta_{j}")));
        }
        out.extend((2..=self.d).map(|j| j.to_string()));
        out
    }

    /// True parameter vector in estimate order.
    pub fn truth(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.model == ModelKind::Continuous {
            out.extend(self.beta0());
            out.extend(self.delta0());
        }
        out.extend(self.true_params.psi_tilde.iter().copied());
        out
    }

    /// Number of leading `(β, δ)` coordinates in the estimate vector.
    pub fn linear_coords(&self) -> usize {
        match self.model {
            ModelKind::Continuous => 2 * self.regression_dim(),
            ModelKind::Binary => 0,
        }
    }

    /// Bandwidth at sample size `n`.
    pub fn bandwidth_for(&self, n: usize) -> Result<Bandwidth> {
        match &self.bandwidth {
            BandwidthSpec::Sigma(s) => Bandwidth::explicit(*s),
            BandwidthSpec::Exponent(a) => Bandwidth::from_exponent(n, *a),
            BandwidthSpec::Exponents(list) if list.len() == 1 => Bandwidth::from_exponent(n, list[0]),
            BandwidthSpec::Exponents(_) => Err(config_err(
                "bandwidth.exponents",
                "a single run needs one exponent; use a sweep for several",
            )),
        }
    }

    /// Generates replication `rep`'s dataset.
    pub fn generate_continuous(&self, rep: u64) -> Result<ContinuousDataset> {
        gen_continuous(
            self.n,
            self.regression_dim(),
            self.d,
            &self.beta0(),
            &self.delta0(),
            &self.true_params.psi_tilde,
            self.noise_sd.unwrap_or(1.0),
            child_seed(self.seed, rep),
        )
    }

    pub fn generate_binary(&self, rep: u64) -> Result<BinaryDataset> {
        gen_binary(
            self.n,
            self.d,
            &self.true_params.psi_tilde,
            self.true_params.alpha0.unwrap_or(0.0),
            self.true_params.beta0.unwrap_or(1.0),
            child_seed(self.seed, rep),
        )
    }
}

/// What one replication produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Summary of a Monte-Carlo run. Matrices are stored row per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub model: ModelKind,
    pub n: usize,
    pub reps: usize,
    pub sigma: f64,
    pub ci_level: f64,
    pub labels: Vec<String>,
    pub linear_coords: usize,
    pub truth: Vec<f64>,
    /// `None` where a replication produced no estimate.
    pub estimates: Vec<Option<Vec<f64>>>,
    pub se: Vec<Option<Vec<f64>>>,
    /// False for replications excluded from the statistics.
    pub included: Vec<bool>,
    pub sd: Vec<f64>,
    pub standardized: Vec<Vec<f64>>,
    pub ks_stat: Vec<f64>,
    pub coverage: Vec<f64>,
    pub mean_bias: Vec<f64>,
    pub qq: Vec<Vec<(f64, f64)>>,
    pub warnings: Vec<String>,
}

/// Sup distance between the empirical CDF of `sample` and `Φ`.
pub fn ks_statistic(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i + 1) as f64 / m - f).max(f - i as f64 / m)
    })
}

/// `(Φ⁻¹((i - 0.5)/m), x_(i))` pairs.
pub fn qq_pairs(sample: &[f64]) -> Vec<(f64, f64)> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let t = normal_quantile((i as f64 + 0.5) / m).expect("plotting position lies in (0, 1)");
            (t, x)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn fit_one(cfg: &MCConfig, rep: u64) -> Result<RepOutcome> {
    match cfg.model {
        ModelKind::Continuous => {
            let data = cfg.generate_continuous(rep)?;
            let bw = cfg.bandwidth_for(data.n())?;
            let fit = fit_continuous(&data, &bw, &cfg.fit)?;
            let inf = infer_continuous(&fit, &data)?;
            let mut warnings = fit.warnings.clone();
            warnings.extend(inf.warnings.iter().cloned());
            Ok(RepOutcome {
                estimate: fit.theta.stacked().as_slice().to_vec(),
                se: inf.se,
                converged: fit.converged,
                warnings,
            })
        }
        ModelKind::Binary => {
            let full = cfg.generate_binary(rep)?;
            let (data, gamma) = match cfg.gamma {
                GammaMode::Mean => (full, None),
                GammaMode::Split => {
                    let half = full.n() / 2;
                    let first = full.rows(0..half)?;
                    let g = crate::estimator::resolve_gamma(&first, None)?;
                    (full.rows(half..full.n())?, Some(g))
                }
            };
            let bw = cfg.bandwidth_for(data.n())?;
            let fit = fit_binary(&data, &bw, gamma, &cfg.fit)?;
            let inf = infer_binary(&fit, &data)?;
            let mut warnings = fit.warnings.clone();
            warnings.extend(inf.warnings.iter().cloned());
            Ok(RepOutcome {
                estimate: fit.theta.psi_tilde.as_slice().to_vec(),
                se: inf.se,
                converged: fit.converged,
                warnings,
            })
        }
    }
}

/// Runs the harness with the library estimator.
pub fn run_mc(cfg: &MCConfig) -> Result<MCReport> {
    run_mc_with(cfg, |rep| fit_one(cfg, rep))
}

/// Runs the harness with `estimate(rep)` producing each replication.
/// Replications that fail, do not converge, or return non-finite values are
/// flagged and excluded.
pub fn run_mc_with<F>(cfg: &MCConfig, mut estimate: F) -> Result<MCReport>
where
    F: FnMut(u64) -> Result<RepOutcome>,
{
    cfg.validate()?;
    let labels = cfg.labels();
    let truth = cfg.truth();
    let k = truth.len();
    let sigma = cfg.bandwidth_for(fit_size(cfg))?.sigma();

    let mut estimates = Vec::with_capacity(cfg.reps);
    let mut ses = Vec::with_capacity(cfg.reps);
    let mut included = Vec::with_capacity(cfg.reps);
    let mut warnings = Vec::new();
    let mut rep_warnings = 0usize;

    for rep in 0..cfg.reps {
        match estimate(rep as u64) {
            Ok(out) => {
                if out.estimate.len() != k || out.se.len() != k {
                    return Err(Error::Harness(format!(
                        "replication {rep} returned {} estimates for {k} coordinates",
                        out.estimate.len()
                    )));
                }
                let finite = out.estimate.iter().chain(out.se.iter()).all(|v| v.is_finite());
                if !out.converged {
                    warnings.push(format!("replication {rep} flagged: fit did not converge"));
                } else if !finite {
                    warnings.push(format!("replication {rep} flagged: non-finite estimate or standard error"));
                }
                rep_warnings += out.warnings.len();
                included.push(out.converged && finite);
                estimates.push(Some(out.estimate));
                ses.push(Some(out.se));
            }
            Err(e) => {
                warnings.push(format!("replication {rep} flagged: {e}"));
                included.push(false);
                estimates.push(None);
                ses.push(None);
            }
        }
    }

    let flagged = included.iter().filter(|&&b| !b).count();
    if flagged as f64 > MAX_FLAGGED_FRACTION * cfg.reps as f64 {
        return Err(Error::Harness(format!(
            "{flagged} of {} replications flagged (limit {:.0}%)",
            cfg.reps,
            MAX_FLAGGED_FRACTION * 100.0
        )));
    }
    if flagged > 0 {
        warnings.push(format!("{flagged} of {} replications excluded from the statistics", cfg.reps));
    }
    if rep_warnings > 0 {
        warnings.push(format!("{rep_warnings} fit or inference warnings across replications"));
    }
    let kept: Vec<usize> = (0..cfg.reps).filter(|&r| included[r]).collect();
    if kept.len() < 2 {
        return Err(Error::Harness("fewer than two usable replications".into()));
    }

    let z_crit = normal_quantile(0.5 + cfg.ci_level / 2.0)?;
    let column = |r: usize, j: usize| estimates[r].as_ref().map(|e| e[j]).unwrap_or(f64::NAN);
    let mut sd = Vec::with_capacity(k);
    let mut mean_bias = Vec::with_capacity(k);
    let mut coverage = Vec::with_capacity(k);
    let mut ks_stat = Vec::with_capacity(k);
    let mut qq = Vec::with_capacity(k);
    let mut standardized = vec![vec![0.0; k]; kept.len()];
    for j in 0..k {
        let col: Vec<f64> = kept.iter().map(|&r| column(r, j)).collect();
        let s = sample_sd(&col);
        sd.push(s);
        mean_bias.push(mean(&col) - truth[j]);
        let hits = kept
            .iter()
            .filter(|&&r| {
                let se = ses[r].as_ref().expect("included replications have se")[j];
                (column(r, j) - truth[j]).abs() <= z_crit * se
            })
            .count();
        coverage.push(hits as f64 / kept.len() as f64);
        let z: Vec<f64> = col.iter().map(|v| (v - truth[j]) / s).collect();
        for (row, v) in standardized.iter_mut().zip(z.iter()) {
            row[j] = *v;
        }
        if s > 0.0 {
            ks_stat.push(ks_statistic(&z));
        } else {
            warnings.push(format!("coordinate {} has zero spread across replications", labels[j]));
            ks_stat.push(1.0);
        }
        qq.push(qq_pairs(&z));
    }

    Ok(MCReport {
        model: cfg.model,
        n: cfg.n,
        reps: cfg.reps,
        sigma,
        ci_level: cfg.ci_level,
        labels,
        linear_coords: cfg.linear_coords(),
        truth,
        estimates,
        se: ses,
        included,
        sd,
        standardized,
        ks_stat,
        coverage,
        mean_bias,
        qq,
        warnings,
    })
}

/// Sample size the estimator actually sees in one replication.
fn fit_size(cfg: &MCConfig) -> usize {
    match (cfg.model, cfg.gamma) {
        (ModelKind::Binary, GammaMode::Split) => cfg.n - cfg.n / 2,
        _ => cfg.n,
    }
}

/// One report per exponent of an `exponents` bandwidth list (or a single
/// report otherwise).
pub fn run_mc_sweep(cfg: &MCConfig) -> Result<Vec<MCReport>> {
    match &cfg.bandwidth {
        BandwidthSpec::Exponents(list) => list
            .iter()
            .map(|&a| {
                let mut one = cfg.clone();
                one.bandwidth = BandwidthSpec::Exponent(a);
                run_mc(&one)
            })
            .collect(),
        _ => Ok(vec![run_mc(cfg)?]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub coord: String,
    pub sd_a: f64,
    pub sd_b: f64,
    pub observed_ratio: f64,
    pub predicted_ratio: f64,
}

/// Observed `sd_A/sd_B` against the rate prediction: `(n_B/n_A)^((1+a)/2)`
/// for plane coordinates and `(n_B/n_A)^(1/2)` for `(β, δ)`.
pub fn rate_diagnostic(a: &MCReport, b: &MCReport, exponent: f64) -> Result<Vec<RateRow>> {
    if a.labels != b.labels || a.model != b.model {
        return Err(Error::invalid("rate diagnostic needs two runs of the same model"));
    }
    let growth = b.n as f64 / a.n as f64;
    Ok(a.labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let power = if j < a.linear_coords { 0.5 } else { (1.0 + exponent) / 2.0 };
            RateRow {
                coord: label.clone(),
                sd_a: a.sd[j],
                sd_b: b.sd[j],
                observed_ratio: a.sd[j] / b.sd[j],
                predicted_ratio: growth.powf(power),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub exponent: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub rows: Vec<RateRow>,
    pub report_a: MCReport,
    pub report_b: MCReport,
}

/// Runs the configuration at `n_a` and `n_b` with `σ = n^(-a)`.
pub fn run_rate_check(cfg: &MCConfig, n_a: usize, n_b: usize) -> Result<RateCheck> {
    let exponent = match &cfg.bandwidth {
        BandwidthSpec::Exponent(a) => *a,
        BandwidthSpec::Exponents(list) if list.len() == 1 => list[0],
        _ => {
            return Err(config_err(
                "bandwidth",
                "rate check needs a single bandwidth exponent",
            ))
        }
    };
    let at = |n: usize| {
        let mut c = cfg.clone();
        c.n = n;
        run_mc(&c)
    };
    let report_a = at(n_a)?;
    let report_b = at(n_b)?;
    let rows = rate_diagnostic(&report_a, &report_b, exponent)?;
    Ok(RateCheck {
        exponent,
        n_a,
        n_b,
        rows,
        report_a,
        report_b,
    })
}

/// Writes `summary.json`, `estimates.csv` and one `qq_<coord>.csv` per
/// coordinate into `dir`.
pub fn write_report(report: &MCReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut summary = serde_json::to_vec_pretty(report)?;
    summary.push(b'\n');
    fs::write(dir.join("summary.json"), summary)?;

    let mut est = csv::Writer::from_path(dir.join("estimates.csv"))?;
    est.write_record(["rep", "coord", "value"])?;
    for (r, row) in report.estimates.iter().enumerate() {
        if let Some(row) = row {
            for (label, v) in report.labels.iter().zip(row) {
                est.write_record([r.to_string(), label.clone(), v.to_string()])?;
            }
        }
    }
    est.flush()?;

    for (label, pairs) in report.labels.iter().zip(&report.qq) {
        let mut w = csv::Writer::from_path(dir.join(format!("qq_{label}.csv")))?;
        w.write_record(["theoretical", "empirical"])?;
        for (t, e) in pairs {
            w.write_record([t.to_string(), e.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Writes the ratio table as `rate.csv` and the full result as `rate.json`.
pub fn write_rate_check(check: &RateCheck, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("rate.csv"))?;
    w.write_record(["coord", "sd_a", "sd_b", "observed_ratio", "predicted_ratio"])?;
    for row in &check.rows {
        w.write_record([
            row.coord.clone(),
            row.sd_a.to_string(),
            row.sd_b.to_string(),
            row.observed_ratio.to_string(),
            row.predicted_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    let mut f = fs::File::create(dir.join("rate.json"))?;
    serde_json::to_writer_pretty(&mut f, check)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn binary_config() -> MCConfig {
        MCConfig::from_json(
            r#"{"model": "binary", "n": 400, "d": 2,
                "true_params": {"psi_tilde": [0.5], "alpha0": 0.25, "beta0": 0.75},
                "bandwidth": {"exponent": 0.6}, "reps": 50, "seed": 3}"#,
        )
        .unwrap()
    }

    #[test]
    fn child_seeds_are_distinct() {
        let mut seen: Vec<u64> = (0..10_000).map(|r| child_seed(42, r)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10_000);
        assert_ne!(child_seed(1, 0), child_seed(2, 0));
    }

    #[test]
    fn binary_generator_properties() {
        let a = gen_binary(2000, 3, &[0.5, -0.5], 0.25, 0.75, 9).unwrap();
        let b = gen_binary(2000, 3, &[0.5, -0.5], 0.25, 0.75, 9).unwrap();
        assert_eq!(a, b);
        let psi = DVector::from_vec(vec![0.5, -0.5]);
        let (mut hits, mut total) = (0.0, 0.0);
        for i in 0..a.n() {
            if plane_index(a.q(), i, &psi) > 0.0 {
                total += 1.0;
                hits += a.y()[i];
            }
        }
        let rate = hits / total;
        assert!((rate - 0.75).abs() <= 3.0 * (0.75f64 * 0.25 / total).sqrt(), "{rate}");
    }

    #[test]
    fn fair_coin_labels() {
        let n = 10_000;
        let data = gen_binary(n, 2, &[2.0], 0.5, 0.5, 1).unwrap();
        let ones = data.y().sum();
        // χ² with one degree of freedom against its 0.999 quantile.
        let chi2 = (ones - n as f64 / 2.0).powi(2) / (n as f64 / 4.0);
        assert!(chi2 < 10.83, "{chi2}");
    }

    #[test]
    fn continuous_generator_properties() {
        let exact = gen_continuous(50, 2, 2, &[1.0, -2.0], &[0.0, 0.0], &[0.3], 0.0, 4).unwrap();
        let fit = exact.x() * DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(&fit, exact.y());

        let n = 5000;
        let noisy = gen_continuous(n, 2, 2, &[1.0, 1.0], &[1.0, 1.0], &[0.3], 0.7, 4).unwrap();
        let psi = DVector::from_vec(vec![0.3]);
        let resid: Vec<f64> = (0..n)
            .map(|i| {
                let on = plane_index(noisy.q(), i, &psi) > 0.0;
                let scale = if on { 2.0 } else { 1.0 };
                noisy.y()[i] - scale * (noisy.x()[(i, 0)] + noisy.x()[(i, 1)])
            })
            .collect();
        let var = sample_sd(&resid).powi(2);
        let target = 0.49;
        assert!((var - target).abs() <= 4.0 * target * (2.0 / n as f64).sqrt(), "{var}");
        assert_eq!(
            noisy,
            gen_continuous(n, 2, 2, &[1.0, 1.0], &[1.0, 1.0], &[0.3], 0.7, 4).unwrap()
        );
    }

    #[test]
    fn ks_on_exact_quantiles() {
        let m = 40;
        let sample: Vec<f64> = (0..m)
            .map(|i| normal_quantile((i as f64 + 0.5) / m as f64).unwrap())
            .collect();
        assert!(ks_statistic(&sample) <= 0.5 / m as f64 + 1e-12);
        assert!(ks_statistic(&[0.3; 10]) >= 0.5);
    }

    #[test]
    fn ks_hand_sample() {
        // Reference from a 30-digit evaluation of the same definition.
        let v = ks_statistic(&[-1.2, 0.1, 0.4, 0.5, 2.0]);
        assert_abs_diff_eq!(v, 0.339_827_837_277_029, epsilon = 1e-12);
    }

    #[test]
    fn qq_pairs_are_sorted() {
        let pairs = qq_pairs(&[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert_abs_diff_eq!(pairs[0].0, -pairs[3].0, epsilon = 1e-12);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = MCConfig::from_json(
            r#"{"model": "binary", "n": 400, "d": 2,
                "true_params": {"psi_tilde": [0.5], "alpha0": "x", "beta0": 0.75},
                "bandwidth": {"exponent": 0.6}, "reps": 50}"#,
        )
        .unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "true_params.alpha0"),
            other => panic!("{other}"),
        }
        let err = MCConfig::from_json(
            r#"{"model": "binary", "n": 400, "d": 2, "colour": 1,
                "true_params": {"psi_tilde": [0.5], "alpha0": 0.2, "beta0": 0.75},
                "bandwidth": {"exponent": 0.6}, "reps": 50}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        let err = MCConfig::from_json(
            r#"{"model": "binary", "n": 400, "d": 2,
                "true_params": {"psi_tilde": [0.5], "alpha0": 0.8, "beta0": 0.75},
                "bandwidth": {"exponent": 0.6}, "reps": 50}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "true_params"), "{err}");
        let mut cfg = binary_config();
        cfg.reps = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref path, .. }) if path == "reps"));
    }

    fn injected(cfg: &MCConfig, meta: u64) -> MCReport {
        let truth = cfg.truth();
        run_mc_with(cfg, |rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(meta, rep));
            Ok(RepOutcome {
                estimate: truth.iter().map(|t| t + rng.sample::<f64, _>(StandardNormal)).collect(),
                se: vec![1.0; truth.len()],
                converged: true,
                warnings: vec![],
            })
        })
        .unwrap()
    }

    #[test]
    fn ks_calibrated_under_injected_normals() {
        let mut cfg = binary_config();
        cfg.reps = 100;
        let crit = 1.36 / (cfg.reps as f64).sqrt();
        let metas = 100;
        let below = (0..metas)
            .filter(|&m| injected(&cfg, m).ks_stat[0] <= crit)
            .count();
        assert!(below >= 90, "{below}/{metas}");
    }

    #[test]
    fn coverage_calibrated_under_injected_normals() {
        let mut cfg = binary_config();
        cfg.reps = 400;
        let report = injected(&cfg, 77);
        let band = 2.576 * (0.95f64 * 0.05 / cfg.reps as f64).sqrt();
        assert!((report.coverage[0] - 0.95).abs() <= band, "{}", report.coverage[0]);
        let mean_z = mean(&report.standardized.iter().map(|r| r[0]).collect::<Vec<_>>());
        assert!(mean_z.abs() <= 4.0 / (cfg.reps as f64).sqrt());
    }

    #[test]
    fn flagged_fraction_limit() {
        let cfg = binary_config();
        let too_many = run_mc_with(&cfg, |rep| {
            Ok(RepOutcome {
                estimate: vec![rep as f64],
                se: vec![1.0],
                converged: rep % 4 != 0,
                warnings: vec![],
            })
        });
        assert!(matches!(too_many, Err(Error::Harness(_))));
        let fine = run_mc_with(&cfg, |rep| {
            if rep == 3 {
                return Err(Error::DegenerateRegime);
            }
            Ok(RepOutcome {
                estimate: vec![rep as f64],
                se: vec![1.0],
                converged: true,
                warnings: vec![],
            })
        })
        .unwrap();
        assert!(!fine.included[3]);
        assert_eq!(fine.standardized.len(), cfg.reps - 1);
        assert!(fine.warnings.iter().any(|w| w.contains("replication 3 flagged")));
    }

    #[test]
    fn minimal_binary_run() {
        let mut cfg = binary_config();
        cfg.reps = 2;
        cfg.fit.n_starts = 2;
        let report = run_mc(&cfg).unwrap();
        assert_eq!(report.estimates.len(), 2);
        assert_eq!(report.qq[0].len(), report.standardized.len());
        assert!(report.sd[0] > 0.0);
        assert!(report.ks_stat.iter().all(|k| (0.0..=1.0).contains(k)));
        assert!(report.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn minimal_continuous_run_is_reproducible() {
        let cfg = MCConfig::from_json(
            r#"{"model": "continuous", "n": 200, "p": 2, "d": 2,
                "true_params": {"psi_tilde": [0.5]},
                "bandwidth": {"sigma": 0.05}, "reps": 3, "seed": 5,
                "fit": {"n_starts": 2}}"#,
        )
        .unwrap();
        let a = run_mc(&cfg).unwrap();
        let b = run_mc(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, vec!["beta_1", "beta_2", "delta_1", "delta_2", "2"]);
        assert_eq!(a.truth, vec![1.0, 1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn rate_prediction_arithmetic() {
        let mut cfg = binary_config();
        cfg.reps = 4;
        let a = injected(&cfg, 1);
        let mut b = injected(&cfg, 2);
        b.n = 4 * a.n;
        let rows = rate_diagnostic(&a, &b, 0.7).unwrap();
        assert_abs_diff_eq!(rows[0].predicted_ratio, 4f64.powf(0.85), epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].predicted_ratio, 3.249, epsilon = 1e-3);

        let mut ca = a.clone();
        ca.linear_coords = 1;
        let mut cb = b.clone();
        cb.linear_coords = 1;
        assert_abs_diff_eq!(rate_diagnostic(&ca, &cb, 0.7).unwrap()[0].predicted_ratio, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn report_files() {
        let mut cfg = binary_config();
        cfg.reps = 5;
        let report = injected(&cfg, 8);
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let qq = fs::read_to_string(dir.path().join("qq_2.csv")).unwrap();
        assert!(qq.starts_with("theoretical,empirical\n"));
        assert_eq!(qq.lines().count(), 6);
        let est = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
        assert!(est.starts_with("rep,coord,value\n"));
        let back: MCReport =
            serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
