//! Gaussian kernel functions and small dense linear algebra.
//!
//! The smoothing kernel is the standard normal distribution function
//! `K = Φ`, so `K' = φ` and `K'' = -x φ(x)`. The unchecked variants
//! ([`cdf`], [`pdf`], [`pdf_deriv`]) are used in the hot loops of the
//! model code; the `kernel_*` functions validate their argument.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `1 / sqrt(2π)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Condition number above which [`solve_sym`] falls back to a ridge.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Relative ridge added to the diagonal on fallback.
pub const RIDGE_FACTOR: f64 = 1e-10;

/// Values of the kernel and its first two derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub cdf: f64,
    pub pdf: f64,
    pub pdf_deriv: f64,
}

impl KernelValue {
    #[inline]
    pub fn at(x: f64) -> Self {
        let pdf = pdf(x);
        KernelValue {
            cdf: cdf(x),
            pdf,
            pdf_deriv: -x * pdf,
        }
    }
}

/// Standard normal CDF, `Φ(x) = erfc(-x/√2)/2`.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Derivative of the standard normal density, `-x φ(x)`.
#[inline]
pub fn pdf_deriv(x: f64) -> f64 {
    -x * pdf(x)
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("kernel argument must be finite, got {x}")))
    }
}

pub fn kernel_cdf(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(cdf(x))
}

pub fn kernel_pdf(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(pdf(x))
}

pub fn kernel_pdf_deriv(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(pdf_deriv(x))
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by two Halley refinements
/// against [`cdf`], which brings the residual `|Φ(x) - p|` to rounding
/// level.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        // Work in the smaller tail so the residual keeps relative precision.
        let e = if x > 0.0 {
            (1.0 - p) - cdf(-x)
        } else {
            cdf(x) - p
        };
        let u = e / pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Result of a symmetric solve.
#[derive(Debug, Clone)]
pub struct SymSolve {
    pub x: DMatrix<f64>,
    /// Condition estimate of the matrix actually factorized.
    pub condition: f64,
    /// True when the ridge fallback was used.
    pub regularized: bool,
}

/// Spectral condition estimate `max|λ| / min|λ|` of a symmetric matrix.
pub fn condition_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = a.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l.abs());
        hi = hi.max(l.abs());
    }
    if !hi.is_finite() || hi == 0.0 || lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `A X = B` for symmetric `A`.
///
/// If `A` is numerically singular the solve is retried once with
/// `A + 1e-10 · |tr A| / k · I`.
pub fn solve_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SymSolve> {
    let k = a.nrows();
    if a.ncols() != k || b.nrows() != k {
        return Err(Error::shape(format!(
            "solve_sym: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("solve_sym: non-finite entry"));
    }
    if k == 0 {
        return Ok(SymSolve {
            x: DMatrix::zeros(0, b.ncols()),
            condition: 1.0,
            regularized: false,
        });
    }

    let condition = condition_sym(a);
    if condition <= SINGULAR_CONDITION {
        if let Some(x) = a.clone().lu().solve(b) {
            return Ok(SymSolve {
                x,
                condition,
                regularized: false,
            });
        }
    }

    let scale = a.trace().abs() / k as f64;
    let ridge = RIDGE_FACTOR * scale;
    if ridge == 0.0 {
        return Err(Error::Singular { condition });
    }
    let shifted = a + DMatrix::identity(k, k) * ridge;
    let shifted_condition = condition_sym(&shifted);
    if shifted_condition > SINGULAR_CONDITION {
        return Err(Error::Singular {
            condition: shifted_condition,
        });
    }
    let x = shifted
        .lu()
        .solve(b)
        .ok_or(Error::Singular {
            condition: shifted_condition,
        })?;
    Ok(SymSolve {
        x,
        condition: shifted_condition,
        regularized: true,
    })
}

/// Vector right-hand side convenience wrapper around [`solve_sym`].
pub fn solve_sym_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let sol = solve_sym(a, &rhs)?;
    Ok((sol.x.column(0).into_owned(), sol.regularized))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its eigen
/// decomposition. Eigenvalues below `1e-12 · max|λ|` are dropped.
pub fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let mut out = DMatrix::zeros(k, k);
    if top == 0.0 {
        return out;
    }
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > 1e-12 * top {
            let v = eig.eigenvectors.column(j);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// True when the symmetric matrix admits a Cholesky factorization.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.nrows() > 0 && a.clone().cholesky().is_some()
}

/// Symmetrizes in place by averaging with the transpose.
pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let k = a.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Composite 5-point Gauss-Legendre quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683_1,
        0.0,
        0.538_469_310_105_683_1,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189_1,
        0.478_628_670_499_366_5,
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
    ];
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let mid = a + (i as f64 + 0.5) * h;
        let half = 0.5 * h;
        let s: f64 = NODES
            .iter()
            .zip(WEIGHTS.iter())
            .map(|(&t, &w)| w * f(mid + half * t))
            .sum();
        total += s * half;
    }
    total
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
