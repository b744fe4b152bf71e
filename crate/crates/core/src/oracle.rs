//! Exact minimizers of the unsmoothed criteria for a scalar free plane
//! coordinate (`d = 2`).
//!
//! With `ψ = (1, ψ̃)` row `i` changes regime only at `ψ̃ = -q_i1/q_i2`, so
//! the unsmoothed loss is piecewise constant in `ψ̃` between sorted
//! breakpoints. Evaluating one point inside every interval (midpoints plus
//! one point beyond each end) therefore visits every attainable partition
//! of the rows, up to partitions that exist only exactly on a breakpoint
//! shared by rows whose `q_i2` have opposite signs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    loss_unsmoothed_binary, row_dot, BinaryDataset, ContinuousDataset, PsiBinary, ThetaContinuous,
};
use crate::numerics::solve_sym_vec;

/// Relative tolerance under which two candidate losses count as tied.
const TIE_TOL: f64 = 1e-12;

/// Sorted candidate values of `ψ̃`: midpoints between distinct breakpoints
/// plus `±(max|b| + 1)`.
pub fn candidates(q: &DMatrix<f64>) -> Vec<f64> {
    let mut b: Vec<f64> = (0..q.nrows())
        .filter(|&i| q[(i, 1)] != 0.0)
        .map(|i| -q[(i, 0)] / q[(i, 1)])
        .collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    let outer = b.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
    let mut out = Vec::with_capacity(b.len() + 1);
    out.push(-outer);
    out.extend(b.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(outer);
    out
}

fn improves(candidate: f64, best: f64) -> bool {
    candidate < best - TIE_TOL * (1.0 + best.abs())
}

/// Global minimizer of the unsmoothed binary criterion over scalar `ψ̃`.
/// Ties go to the smallest `ψ̃`.
pub fn oracle_binary_1d(data: &BinaryDataset, gamma: f64) -> Result<(f64, f64)> {
    if data.d() != 2 {
        return Err(Error::UnsupportedDimension(data.d()));
    }
    let mut best: Option<(f64, f64)> = None;
    for t in candidates(data.q()) {
        let psi = PsiBinary {
            psi_tilde: DVector::from_element(1, t),
            gamma,
        };
        let loss = loss_unsmoothed_binary(&psi, data)?;
        match best {
            Some((_, l)) if !improves(loss, l) => {}
            _ => best = Some((t, loss)),
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

/// OLS on the selected rows; `None` when the side is too small or its Gram
/// matrix is singular.
fn ols(data: &ContinuousDataset, rows: &[usize]) -> Option<(DVector<f64>, f64)> {
    let p = data.p();
    if rows.len() < p {
        return None;
    }
    let (x, y) = (data.x(), data.y());
    let mut g = DMatrix::zeros(p, p);
    let mut h = DVector::zeros(p);
    for &i in rows {
        for a in 0..p {
            h[a] += x[(i, a)] * y[i];
            for b in 0..p {
                g[(a, b)] += x[(i, a)] * x[(i, b)];
            }
        }
    }
    let (coef, regularized) = solve_sym_vec(&g, &h).ok()?;
    if regularized {
        return None;
    }
    let rss = rows
        .iter()
        .map(|&i| (y[i] - row_dot(x, i, &coef)).powi(2))
        .sum();
    Some((coef, rss))
}

/// Global minimizer of the unsmoothed least-squares criterion over
/// `(β, δ, ψ̃)` with scalar `ψ̃`. Partitions leaving fewer than `p` rows on
/// a side are skipped. Ties go to the smallest `ψ̃`.
pub fn oracle_continuous_1d(data: &ContinuousDataset) -> Result<(ThetaContinuous, f64)> {
    if data.d() != 2 {
        return Err(Error::UnsupportedDimension(data.d()));
    }
    let n = data.n();
    let q = data.q();
    let mut best: Option<(ThetaContinuous, f64)> = None;
    let mut low = Vec::with_capacity(n);
    let mut high = Vec::with_capacity(n);
    for t in candidates(q) {
        low.clear();
        high.clear();
        for i in 0..n {
            if q[(i, 0)] + t * q[(i, 1)] > 0.0 {
                high.push(i);
            } else {
                low.push(i);
            }
        }
        let (Some((a, rss_a)), Some((b, rss_b))) = (ols(data, &low), ols(data, &high)) else {
            continue;
        };
        let loss = (rss_a + rss_b) / n as f64;
        match &best {
            Some((_, l)) if !improves(loss, *l) => {}
            _ => {
                let delta = &b - &a;
                best = Some((
                    ThetaContinuous {
                        beta: a,
                        delta,
                        psi_tilde: DVector::from_element(1, t),
                    },
                    loss,
                ));
            }
        }
    }
    best.ok_or_else(|| {
        Error::InsufficientData(format!(
            "no partition leaves at least p = {} rows with a regular design on each side",
            data.p()
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss_unsmoothed_continuous;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_binary(seed: u64, n: usize) -> BinaryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        BinaryDataset::new(y, q).unwrap()
    }

    fn random_continuous(seed: u64, n: usize, p: usize) -> ContinuousDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        x.column_mut(0).fill(1.0);
        let q = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let regime = if q[(i, 0)] - 0.5 * q[(i, 1)] > 0.0 { 2.0 } else { 0.0 };
            x[(i, p - 1)] + regime + rng.sample::<f64, _>(StandardNormal) * 0.5
        });
        ContinuousDataset::new(y, x, q).unwrap()
    }

    fn min_gap(q: &DMatrix<f64>) -> f64 {
        let mut b: Vec<f64> = (0..q.nrows()).map(|i| -q[(i, 0)] / q[(i, 1)]).collect();
        b.sort_by(f64::total_cmp);
        b.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn candidates_cover_every_interval() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -2.0, 1.0, 3.0, 0.0]);
        // Breakpoints -1 and 2; the third row never switches.
        assert_eq!(candidates(&q), vec![-3.0, 0.5, 3.0]);
    }

    #[test]
    fn binary_matches_dense_grid() {
        for seed in 0..5 {
            let data = random_binary(seed, 10);
            let gamma = 0.5;
            let (t, loss) = oracle_binary_1d(&data, gamma).unwrap();
            let cands = candidates(data.q());
            let (lo, hi) = (cands[0], cands[cands.len() - 1]);
            let m = 1_000_000;
            let step = (hi - lo) / m as f64;
            let q = data.q();
            let y = data.y();
            let mut grid_min = f64::INFINITY;
            for k in 0..=m {
                let s = lo + step * k as f64;
                let v: f64 = (0..data.n())
                    .filter(|&i| q[(i, 0)] + s * q[(i, 1)] <= 0.0)
                    .map(|i| y[i] - gamma)
                    .sum::<f64>()
                    / data.n() as f64;
                grid_min = grid_min.min(v);
            }
            assert!(grid_min >= loss - 1e-12, "seed {seed}: grid beat the oracle");
            if min_gap(q) > 2.0 * step {
                assert_abs_diff_eq!(grid_min, loss, epsilon = 1e-12);
            }
            let at = PsiBinary::new(vec![t], gamma).unwrap();
            assert_abs_diff_eq!(loss_unsmoothed_binary(&at, &data).unwrap(), loss, epsilon = 1e-15);
        }
    }

    #[test]
    fn binary_separable_case() {
        // Rows on the ≤ side contribute y - γ, so the minimum puts every
        // y = 0 row there and every y = 1 row on the other side.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let q = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| if q[(i, 0)] + 0.3 * q[(i, 1)] <= 0.0 { 0.0 } else { 1.0 });
        let data = BinaryDataset::new(y.clone(), q.clone()).unwrap();
        let gamma = 0.5;
        let (t, loss) = oracle_binary_1d(&data, gamma).unwrap();
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64;
        assert_abs_diff_eq!(loss, -gamma * zeros / n as f64, epsilon = 1e-14);
        for i in 0..n {
            let side_low = q[(i, 0)] + t * q[(i, 1)] <= 0.0;
            assert_eq!(side_low, y[i] == 0.0);
        }
    }

    #[test]
    fn binary_constant_labels_pick_smallest() {
        let base = random_binary(3, 12);
        let data = BinaryDataset::new(DVector::from_element(12, 1.0), base.q().clone()).unwrap();
        let (t, loss) = oracle_binary_1d(&data, 1.0).unwrap();
        assert_eq!(t, candidates(data.q())[0]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn unsupported_dimension() {
        let q = DMatrix::from_element(4, 3, 1.0);
        let data = BinaryDataset::new(DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]), q).unwrap();
        assert!(matches!(oracle_binary_1d(&data, 0.5), Err(Error::UnsupportedDimension(3))));
    }

    #[test]
    fn continuous_matches_dense_grid() {
        for seed in 0..3 {
            let data = random_continuous(seed, 30, 2);
            let (theta, loss) = oracle_continuous_1d(&data).unwrap();
            assert_abs_diff_eq!(
                loss_unsmoothed_continuous(&theta, &data).unwrap(),
                loss,
                epsilon = 1e-12
            );
            let cands = candidates(data.q());
            let (lo, hi) = (cands[0], cands[cands.len() - 1]);
            let m = 20_000;
            let step = (hi - lo) / m as f64;
            let q = data.q();
            let mut grid_min = f64::INFINITY;
            for k in 0..=m {
                let s = lo + step * k as f64;
                let (low, high): (Vec<usize>, Vec<usize>) =
                    (0..data.n()).partition(|&i| q[(i, 0)] + s * q[(i, 1)] <= 0.0);
                if let (Some((_, a)), Some((_, b))) = (ols(&data, &low), ols(&data, &high)) {
                    grid_min = grid_min.min((a + b) / data.n() as f64);
                }
            }
            assert!(grid_min >= loss - 1e-12, "seed {seed}");
            if min_gap(q) > 2.0 * step {
                assert_abs_diff_eq!(grid_min, loss, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn continuous_noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let q = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (b0, d0, t0) = ([1.0, -0.5], [2.0, 1.0], 0.4);
        let y = DVector::from_fn(n, |i, _| {
            let on = q[(i, 0)] + t0 * q[(i, 1)] > 0.0;
            (0..2)
                .map(|j| x[(i, j)] * (b0[j] + if on { d0[j] } else { 0.0 }))
                .sum()
        });
        let data = ContinuousDataset::new(y, x, q.clone()).unwrap();
        let (theta, loss) = oracle_continuous_1d(&data).unwrap();
        assert!(loss < 1e-20);
        for j in 0..2 {
            assert_abs_diff_eq!(theta.beta[j], b0[j], epsilon = 1e-9);
            assert_abs_diff_eq!(theta.delta[j], d0[j], epsilon = 1e-9);
        }
        // The returned ψ̃ induces the true partition.
        let t = theta.psi_tilde[0];
        for i in 0..n {
            assert_eq!(q[(i, 0)] + t * q[(i, 1)] > 0.0, q[(i, 0)] + t0 * q[(i, 1)] > 0.0);
        }
    }

    #[test]
    fn continuous_no_change_ties_to_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let q = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 0.5 + 2.0 * x[(i, 1)]);
        let data = ContinuousDataset::new(y, x, q).unwrap();
        let (theta, loss) = oracle_continuous_1d(&data).unwrap();
        assert!(loss < 1e-20);
        // The first admissible candidate in ascending order.
        let first = candidates(data.q())
            .into_iter()
            .find(|&t| {
                let (low, high): (Vec<usize>, Vec<usize>) = (0..n)
                    .partition(|&i| data.q()[(i, 0)] + t * data.q()[(i, 1)] <= 0.0);
                ols(&data, &low).is_some() && ols(&data, &high).is_some()
            })
            .unwrap();
        assert_eq!(theta.psi_tilde[0], first);
    }

    #[test]
    fn continuous_insufficient_data() {
        // p = 2 with every row sharing the same x: no side is ever regular.
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |_, j| j as f64 + 1.0);
        let q = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64 - 3.0);
        let y = DVector::from_element(n, 1.0);
        let data = ContinuousDataset::new(y, x, q).unwrap();
        assert!(matches!(oracle_continuous_1d(&data), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn invariant_to_permutation_and_scale() {
        let data = random_continuous(21, 25, 2);
        let (theta, loss) = oracle_continuous_1d(&data).unwrap();
        let perm: Vec<usize> = (0..data.n()).rev().collect();
        let (tp, lp) = oracle_continuous_1d(&data.permuted(&perm)).unwrap();
        let (ts, ls) = oracle_continuous_1d(&data.with_scaled_q(3.5)).unwrap();
        assert_abs_diff_eq!(lp, loss, epsilon = 1e-12);
        assert_abs_diff_eq!(ls, loss, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.psi_tilde[0], theta.psi_tilde[0], epsilon = 1e-12);
        assert_abs_diff_eq!(ts.psi_tilde[0], theta.psi_tilde[0], epsilon = 1e-12);

        let b = random_binary(22, 15);
        let (t0, l0) = oracle_binary_1d(&b, 0.4).unwrap();
        let perm: Vec<usize> = (0..b.n()).rev().collect();
        let (t1, l1) = oracle_binary_1d(&b.permuted(&perm), 0.4).unwrap();
        let (t2, l2) = oracle_binary_1d(&b.with_scaled_q(0.2), 0.4).unwrap();
        assert_eq!(t0, t1);
        assert_abs_diff_eq!(l1, l0, epsilon = 1e-15);
        assert_abs_diff_eq!(t2, t0, epsilon = 1e-12);
        assert_abs_diff_eq!(l2, l0, epsilon = 1e-15);
    }
}
