use nalgebra::{DMatrix, DVector};

use super::{plane_index, row_dot, sum_rows, Bandwidth, ContinuousDataset, ThetaContinuous};
use crate::error::Result;
use crate::numerics::{cdf, pdf, pdf_deriv};

/// Residual pieces of one row: `r = y - xᵀβ`, `u = xᵀδ`, `t = qᵀψ`.
#[inline]
fn row_parts(theta: &ThetaContinuous, data: &ContinuousDataset, i: usize) -> (f64, f64, f64) {
    let r = data.y[i] - row_dot(&data.x, i, &theta.beta);
    let u = row_dot(&data.x, i, &theta.delta);
    let t = plane_index(&data.q, i, &theta.psi_tilde);
    (r, u, t)
}

/// Unsmoothed least-squares criterion with regime indicator `1{qᵀψ > 0}`.
pub fn loss_unsmoothed_continuous(theta: &ThetaContinuous, data: &ContinuousDataset) -> Result<f64> {
    data.check_theta(theta)?;
    let n = data.n();
    let s = sum_rows(n, |i| {
        let (r, u, t) = row_parts(theta, data, i);
        let e = if t > 0.0 { r - u } else { r };
        e * e
    });
    Ok(s / n as f64)
}

/// Smoothed criterion, bracket form
/// `(1/n) Σ [r² + (-2ru + u²) K(qᵀψ/σ)]`.
pub fn loss_smoothed_continuous(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<f64> {
    data.check_theta(theta)?;
    let n = data.n();
    let sigma = bw.sigma();
    let s = sum_rows(n, |i| {
        let (r, u, t) = row_parts(theta, data, i);
        r * r + (-2.0 * r * u + u * u) * cdf(t / sigma)
    });
    Ok(s / n as f64)
}

/// Smoothed criterion, mixture form
/// `(1/n) Σ [(1-K) r² + K (r - u)²]`. Algebraically equal to
/// [`loss_smoothed_continuous`].
pub fn loss_smoothed_continuous_mixture(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<f64> {
    data.check_theta(theta)?;
    let n = data.n();
    let sigma = bw.sigma();
    let s = sum_rows(n, |i| {
        let (r, u, t) = row_parts(theta, data, i);
        let z = t / sigma;
        let e = r - u;
        cdf(-z) * r * r + cdf(z) * e * e
    });
    Ok(s / n as f64)
}

/// Gradient of the smoothed continuous criterion split by block.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousGradient {
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    pub psi_tilde: DVector<f64>,
}

impl ContinuousGradient {
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

    pub fn norm(&self) -> f64 {
        (self.beta.norm_squared() + self.delta.norm_squared() + self.psi_tilde.norm_squared())
            .sqrt()
    }
}

/// Writes the i-th summand of the gradient into `out` (length `2p + d - 1`).
#[inline]
fn row_gradient(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    sigma: f64,
    i: usize,
    out: &mut [f64],
) {
    let (p, d) = (data.p(), data.d());
    let (r, u, t) = row_parts(theta, data, i);
    let z = t / sigma;
    let k = cdf(z);
    let kp = pdf(z);
    for j in 0..p {
        let xj = data.x[(i, j)];
        out[j] = 2.0 * (-xj * r + xj * u * k);
        out[p + j] = 2.0 * (-xj * r + xj * u) * k;
    }
    let bracket = (-2.0 * r * u + u * u) * kp / sigma;
    for j in 1..d {
        out[2 * p + j - 1] = bracket * data.q[(i, j)];
    }
}

/// Analytic gradient in `(β, δ, ψ̃)`.
pub fn grad_smoothed_continuous(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<ContinuousGradient> {
    data.check_theta(theta)?;
    let (n, p) = (data.n(), data.p());
    let k = 2 * p + data.d() - 1;
    let mut acc = vec![0.0; k];
    let mut row = vec![0.0; k];
    for i in 0..n {
        row_gradient(theta, data, bw.sigma(), i, &mut row);
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    let scale = 1.0 / n as f64;
    let g = DVector::from_vec(acc) * scale;
    Ok(ContinuousGradient {
        beta: g.rows(0, p).into_owned(),
        delta: g.rows(p, p).into_owned(),
        psi_tilde: g.rows(2 * p, k - 2 * p).into_owned(),
    })
}

/// Per-observation gradient contributions, one row per observation; the
/// column means equal [`grad_smoothed_continuous`].
pub fn per_observation_gradients(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<DMatrix<f64>> {
    data.check_theta(theta)?;
    let k = 2 * data.p() + data.d() - 1;
    let mut out = DMatrix::zeros(data.n(), k);
    let mut row = vec![0.0; k];
    for i in 0..data.n() {
        row_gradient(theta, data, bw.sigma(), i, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Hessian in `(β, δ, ψ̃)` order.
pub fn hessian_smoothed_continuous(
    theta: &ThetaContinuous,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<DMatrix<f64>> {
    data.check_theta(theta)?;
    let (n, p, d) = (data.n(), data.p(), data.d());
    let m = d - 1;
    let k = 2 * p + m;
    let sigma = bw.sigma();
    let mut h = DMatrix::zeros(k, k);
    let (bo, dof, pof) = (0, p, 2 * p);

    for i in 0..n {
        let (r, u, t) = row_parts(theta, data, i);
        let z = t / sigma;
        let kc = cdf(z);
        let kp = pdf(z);
        let kpp = pdf_deriv(z);
        let bracket = -2.0 * r * u + u * u;
        for a in 0..p {
            let xa = data.x[(i, a)];
            for b in 0..p {
                let xx = xa * data.x[(i, b)];
                h[(bo + a, bo + b)] += 2.0 * xx;
                h[(bo + a, dof + b)] += 2.0 * xx * kc;
                h[(dof + a, dof + b)] += 2.0 * xx * kc;
            }
            for c in 0..m {
                let qc = data.q[(i, c + 1)];
                h[(bo + a, pof + c)] += 2.0 * xa * u * qc * kp / sigma;
                h[(dof + a, pof + c)] += 2.0 * (-xa * r + xa * u) * qc * kp / sigma;
            }
        }
        for a in 0..m {
            let qa = data.q[(i, a + 1)];
            for b in 0..m {
                h[(pof + a, pof + b)] +=
                    bracket * qa * data.q[(i, b + 1)] * kpp / (sigma * sigma);
            }
        }
    }
    // Mirror the upper blocks.
    for a in 0..k {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    Ok(h / n as f64)
}
