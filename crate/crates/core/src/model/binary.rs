use nalgebra::{DMatrix, DVector};

use super::{plane_index, sum_rows, Bandwidth, BinaryDataset, PsiBinary};
use crate::error::Result;
use crate::numerics::{cdf, pdf, pdf_deriv};

/// Unsmoothed binary criterion `(1/n) Σ (y_i - γ) 1{q_iᵀψ ≤ 0}`.
pub fn loss_unsmoothed_binary(psi: &PsiBinary, data: &BinaryDataset) -> Result<f64> {
    data.check_psi(&psi.psi_tilde)?;
    let n = data.n();
    let s = sum_rows(n, |i| {
        if plane_index(&data.q, i, &psi.psi_tilde) <= 0.0 {
            data.y[i] - psi.gamma
        } else {
            0.0
        }
    });
    Ok(s / n as f64)
}

/// Smoothed binary criterion `(1/n) Σ (y_i - γ)(1 - K(q_iᵀψ/σ))`.
pub fn loss_smoothed_binary(psi: &PsiBinary, data: &BinaryDataset, bw: &Bandwidth) -> Result<f64> {
    data.check_psi(&psi.psi_tilde)?;
    let n = data.n();
    let sigma = bw.sigma();
    let s = sum_rows(n, |i| {
        let z = plane_index(&data.q, i, &psi.psi_tilde) / sigma;
        // 1 - Φ(z) = Φ(-z) without cancellation.
        (data.y[i] - psi.gamma) * cdf(-z)
    });
    Ok(s / n as f64)
}

/// Score `T_n(ψ) = -(1/(nσ)) Σ (y_i - γ) K'(q_iᵀψ/σ) q̃_i`.
pub fn score_binary(psi: &PsiBinary, data: &BinaryDataset, bw: &Bandwidth) -> Result<DVector<f64>> {
    data.check_psi(&psi.psi_tilde)?;
    let (n, d) = (data.n(), data.d());
    let sigma = bw.sigma();
    let mut g = DVector::zeros(d - 1);
    for i in 0..n {
        let z = plane_index(&data.q, i, &psi.psi_tilde) / sigma;
        let w = (data.y[i] - psi.gamma) * pdf(z);
        for j in 1..d {
            g[j - 1] += w * data.q[(i, j)];
        }
    }
    Ok(g * (-1.0 / (n as f64 * sigma)))
}

/// Hessian `Q_n(ψ) = -(1/(nσ²)) Σ (y_i - γ) K''(q_iᵀψ/σ) q̃_i q̃_iᵀ`.
pub fn hessian_binary(psi: &PsiBinary, data: &BinaryDataset, bw: &Bandwidth) -> Result<DMatrix<f64>> {
    data.check_psi(&psi.psi_tilde)?;
    let (n, d) = (data.n(), data.d());
    let m = d - 1;
    let sigma = bw.sigma();
    let mut h = DMatrix::zeros(m, m);
    for i in 0..n {
        let z = plane_index(&data.q, i, &psi.psi_tilde) / sigma;
        let w = (data.y[i] - psi.gamma) * pdf_deriv(z);
        for a in 0..m {
            let qa = data.q[(i, a + 1)];
            for b in a..m {
                h[(a, b)] += w * qa * data.q[(i, b + 1)];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    Ok(h * (-1.0 / (n as f64 * sigma * sigma)))
}
