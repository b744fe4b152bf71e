//! Plug-in sandwich covariance, Wald statistics and coefficient tables.
//!
//! The primary covariance is the M-estimator sandwich
//! `(1/n) Ĥ⁻¹ Ŝ Ĥ⁻¹`, where `Ĥ` is the Hessian of the smoothed criterion
//! and `Ŝ` the second moment of the per-observation gradient. It is
//! unaffected by constant factors in the criterion. The individual
//! `V̂`/`Q̂` matrices are also exposed through
//! [`asymptotic_matrices_continuous`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::model::{
    hessian_binary, hessian_smoothed_continuous, per_observation_gradients, plane_index, row_dot,
    Bandwidth, BinaryDataset, ContinuousDataset, PsiBinary, ThetaContinuous,
};
use crate::numerics::{cdf, condition_sym, is_positive_definite, pdf, pinv_sym, solve_sym, symmetrize, SINGULAR_CONDITION};

/// Estimators of the matrices entering the asymptotic variances of the
/// continuous model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticMatrices {
    pub v_gamma: DMatrix<f64>,
    pub q_gamma: DMatrix<f64>,
    pub v_psi: DMatrix<f64>,
    pub q_psi: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Point estimates, `(β, δ, ψ̃)` for the continuous model and `ψ̃` for
    /// the binary model.
    pub estimate: Vec<f64>,
    /// Regression dimension `p` (0 for the binary model).
    pub p: usize,
    pub cov: DMatrix<f64>,
    pub cov_gamma: DMatrix<f64>,
    pub cov_psi: DMatrix<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma_eps2: Option<f64>,
    pub matrices: Option<AsymptoticMatrices>,
    /// True when a pseudo-inverse replaced the Hessian inverse.
    pub pseudo_inverse: bool,
    /// True when the Hessian solve needed the ridge fallback.
    pub regularized: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandwichOptions {
    /// Zero the cross blocks between `(β, δ)` and `ψ̃` before combining.
    pub block_diagonal: bool,
}

/// Two-sided normal p-value.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    (2.0 * cdf(-z.abs())).min(1.0)
}

fn wald(estimate: f64, se: f64) -> (f64, f64) {
    let z = if se > 0.0 {
        estimate / se
    } else if estimate == 0.0 {
        0.0
    } else {
        estimate.signum() * f64::INFINITY
    };
    (z, two_sided_p(z))
}

/// Residual mean square at the unsmoothed fit.
pub fn sigma_eps2_hat(theta: &ThetaContinuous, data: &ContinuousDataset) -> Result<f64> {
    crate::model::loss_unsmoothed_continuous(theta, data)
}

/// `V̂^γ`, `Q̂^γ`, `V̂^ψ`, `Q̂^ψ` at `theta`.
pub fn asymptotic_matrices_continuous(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<AsymptoticMatrices> {
    let h = hessian_smoothed_continuous(theta, data, bw)?;
    let (n, p, d) = (data.n(), data.p(), data.d());
    let m = d - 1;
    let sigma = bw.sigma();
    let (x, y, q) = (data.x(), data.y(), data.q());

    let q_gamma = h.view((0, 0), (2 * p, 2 * p)).into_owned();
    let q_psi = h.view((2 * p, 2 * p), (m, m)).into_owned() * sigma;

    let sigma_eps2 = sigma_eps2_hat(theta, data)?;
    let mut s_all = DMatrix::zeros(p, p);
    let mut s_plus = DMatrix::zeros(p, p);
    let mut v_psi = DMatrix::zeros(m, m);
    for i in 0..n {
        let t = plane_index(q, i, &theta.psi_tilde);
        let above = t > 0.0;
        for a in 0..p {
            for b in 0..p {
                let xx = x[(i, a)] * x[(i, b)];
                s_all[(a, b)] += xx;
                if above {
                    s_plus[(a, b)] += xx;
                }
            }
        }
        let r = y[i] - row_dot(x, i, &theta.beta);
        let e = r - row_dot(x, i, &theta.delta);
        let diff = e * e - r * r;
        let kp = pdf(t / sigma);
        let w = diff * diff * kp * kp;
        for a in 0..m {
            for b in 0..m {
                v_psi[(a, b)] += w * q[(i, a + 1)] * q[(i, b + 1)];
            }
        }
    }
    let nf = n as f64;
    s_all /= nf;
    s_plus /= nf;
    v_psi /= nf * sigma * sigma;

    let mut v_gamma = DMatrix::zeros(2 * p, 2 * p);
    v_gamma.view_mut((0, 0), (p, p)).copy_from(&s_all);
    v_gamma.view_mut((0, p), (p, p)).copy_from(&s_plus);
    v_gamma.view_mut((p, 0), (p, p)).copy_from(&s_plus);
    v_gamma.view_mut((p, p), (p, p)).copy_from(&s_plus);
    v_gamma *= sigma_eps2;

    Ok(AsymptoticMatrices {
        v_gamma,
        q_gamma,
        v_psi,
        q_psi,
    })
}

fn zero_cross_blocks(a: &mut DMatrix<f64>, split: usize) {
    let k = a.nrows();
    for i in 0..split {
        for j in split..k {
            a[(i, j)] = 0.0;
            a[(j, i)] = 0.0;
        }
    }
}

fn finish(
    estimate: Vec<f64>,
    p: usize,
    mut cov: DMatrix<f64>,
    split: usize,
) -> InferenceResult {
    symmetrize(&mut cov);
    let k = cov.nrows();
    let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let (z, p_values): (Vec<f64>, Vec<f64>) =
        estimate.iter().zip(se.iter()).map(|(&e, &s)| wald(e, s)).unzip();
    InferenceResult {
        cov_gamma: cov.view((0, 0), (split, split)).into_owned(),
        cov_psi: cov.view((split, split), (k - split, k - split)).into_owned(),
        cov,
        estimate,
        p,
        se,
        z,
        p_values,
        sigma_eps2: None,
        matrices: None,
        pseudo_inverse: false,
        regularized: false,
        warnings: Vec::new(),
    }
}

/// Sandwich covariance from a Hessian and a stack of per-observation
/// gradients (rows).
pub fn sandwich_from_parts(
    hessian: &DMatrix<f64>,
    per_obs: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, bool)> {
    let n = per_obs.nrows() as f64;
    let k = hessian.nrows();
    let meat = per_obs.transpose() * per_obs / n;
    let inv = solve_sym(hessian, &DMatrix::identity(k, k))
        .map_err(|e| Error::InferenceDegenerate(format!("Hessian not invertible: {e}")))?;
    let cov = &inv.x * meat * inv.x.transpose() / n;
    Ok((cov, inv.regularized))
}

pub fn sandwich_continuous(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<InferenceResult> {
    sandwich_continuous_with(theta, data, bw, SandwichOptions::default())
}

pub fn sandwich_continuous_with(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
    opts: SandwichOptions,
) -> Result<InferenceResult> {
    let split = 2 * data.p();
    let mut h = hessian_smoothed_continuous(theta, data, bw)?;
    let g = per_observation_gradients(theta, data, bw)?;
    let (cov, regularized) = if opts.block_diagonal {
        zero_cross_blocks(&mut h, split);
        let n = g.nrows() as f64;
        let mut meat = g.transpose() * &g / n;
        zero_cross_blocks(&mut meat, split);
        let k = h.nrows();
        let inv = solve_sym(&h, &DMatrix::identity(k, k))
            .map_err(|e| Error::InferenceDegenerate(format!("Hessian not invertible: {e}")))?;
        (&inv.x * meat * inv.x.transpose() / n, inv.regularized)
    } else {
        sandwich_from_parts(&h, &g)?
    };
    let mut out = finish(theta.stacked().as_slice().to_vec(), data.p(), cov, split);
    out.regularized = regularized;
    if regularized {
        out.warnings
            .push("Hessian was numerically singular; ridge-regularized inverse used".into());
    }
    out.sigma_eps2 = Some(sigma_eps2_hat(theta, data)?);
    out.matrices = Some(asymptotic_matrices_continuous(theta, data, bw)?);
    Ok(out)
}

/// Per-observation binary scores `t_i = -(1/σ)(y_i - γ) K'(q_iᵀψ/σ) q̃_i`.
pub fn per_observation_scores_binary(psi: &PsiBinary, data: &BinaryDataset, bw: &Bandwidth) -> DMatrix<f64> {
    let (n, d) = (data.n(), data.d());
    let sigma = bw.sigma();
    let (y, q) = (data.y(), data.q());
    DMatrix::from_fn(n, d - 1, |i, j| {
        let z = plane_index(q, i, &psi.psi_tilde) / sigma;
        -(y[i] - psi.gamma) * pdf(z) * q[(i, j + 1)] / sigma
    })
}

pub fn sandwich_binary(psi: &PsiBinary, data: &BinaryDataset, bw: &Bandwidth) -> Result<InferenceResult> {
    let h = hessian_binary(psi, data, bw)?;
    let t = per_observation_scores_binary(psi, data, bw);
    let n = data.n() as f64;
    let meat = t.transpose() * &t / n;
    if h.iter().all(|&v| v == 0.0) || meat.iter().all(|&v| v == 0.0) {
        return Err(Error::InferenceDegenerate(
            "score variance or Hessian is identically zero".into(),
        ));
    }
    let k = h.nrows();
    let mut warnings = Vec::new();
    let mut pseudo = false;
    let inv = if is_positive_definite(&h) && condition_sym(&h) <= SINGULAR_CONDITION {
        h.clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::identity(k, k))
    } else {
        pseudo = true;
        warnings.push("Hessian singular or indefinite at the estimate; pseudo-inverse used".into());
        pinv_sym(&h)
    };
    let cov = &inv * meat * inv.transpose() / n;
    let mut out = finish(psi.psi_tilde.as_slice().to_vec(), 0, cov, 0);
    out.pseudo_inverse = pseudo;
    out.warnings = warnings;
    Ok(out)
}

/// Sandwich inference at a continuous fit; warns when the fit did not
/// converge.
pub fn infer_continuous(
    fit: &FitResult<ThetaContinuous>,
    data: &ContinuousDataset,
) -> Result<InferenceResult> {
    let mut out = sandwich_continuous(&fit.theta, data, &fit.bandwidth_used)?;
    if !fit.converged {
        out.warnings
            .push("inference computed at a non-converged fit".into());
    }
    Ok(out)
}

pub fn infer_binary(fit: &FitResult<PsiBinary>, data: &BinaryDataset) -> Result<InferenceResult> {
    let mut out = sandwich_binary(&fit.theta, data, &fit.bandwidth_used)?;
    if !fit.converged {
        out.warnings
            .push("inference computed at a non-converged fit".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub rows: Vec<CoefficientRow>,
}

pub const COEFFICIENT_HEADER: [&str; 5] = ["name", "estimate", "se", "z", "p_value"];

impl CoefficientTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(COEFFICIENT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.estimate.to_string(),
                r.se.to_string(),
                r.z.to_string(),
                r.p_value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Names `beta_<x>`, `delta_<x>`, `psi_<q>` for the continuous model (the
/// anchored first `Q` column has no coefficient).
pub fn coefficient_names(x_names: &[String], q_names: &[String]) -> Vec<String> {
    x_names
        .iter()
        .map(|s| format!("beta_{s}"))
        .chain(x_names.iter().map(|s| format!("delta_{s}")))
        .chain(q_names.iter().skip(1).map(|s| format!("psi_{s}")))
        .collect()
}

fn derived_name(beta: &str, delta: &str) -> String {
    match beta.strip_prefix("beta_") {
        Some(rest) => format!("beta+delta_{rest}"),
        None => format!("{beta}+{delta}"),
    }
}

/// Coefficient table with Wald statistics; for the continuous model the
/// second-regime coefficients `β + δ` are added after the `δ` rows.
pub fn wald_table(result: &InferenceResult, names: &[String]) -> Result<CoefficientTable> {
    let k = result.estimate.len();
    if names.len() != k {
        return Err(Error::shape(format!(
            "{} names for {k} coefficients",
            names.len()
        )));
    }
    let row = |j: usize| CoefficientRow {
        name: names[j].clone(),
        estimate: result.estimate[j],
        se: result.se[j],
        z: result.z[j],
        p_value: result.p_values[j],
    };
    let p = result.p;
    let mut rows: Vec<CoefficientRow> = (0..2 * p).map(row).collect();
    for j in 0..p {
        let est = result.estimate[j] + result.estimate[p + j];
        let var = result.cov[(j, j)] + result.cov[(p + j, p + j)] + 2.0 * result.cov[(j, p + j)];
        let se = var.max(0.0).sqrt();
        let (z, p_value) = wald(est, se);
        rows.push(CoefficientRow {
            name: derived_name(&names[j], &names[p + j]),
            estimate: est,
            se,
            z,
            p_value,
        });
    }
    rows.extend((2 * p..k).map(row));
    Ok(CoefficientTable { rows })
}

/// Standard errors of a covariance matrix.
pub fn standard_errors(cov: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(cov.nrows(), |j, _| cov[(j, j)].max(0.0).sqrt())
}
