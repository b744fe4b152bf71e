//! Dense BFGS with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
}

pub(crate) const ARMIJO_C1: f64 = 1e-4;
pub(crate) const SHRINK: f64 = 0.5;
pub(crate) const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Gradient,
    Step,
    MaxIters,
    LineSearch,
}

impl Stop {
    pub fn converged(self) -> bool {
        matches!(self, Stop::Gradient | Stop::Step)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    pub iterations: usize,
    pub stop: Stop,
}

fn gradient_small(g: &DVector<f64>, f: f64, tol: f64) -> bool {
    g.norm() <= tol * (1.0 + f.abs())
}

/// Minimizes `eval` starting at `x0`. `h_inv0` seeds the inverse Hessian;
/// without it the identity is used and rescaled after the first step.
pub(crate) fn minimize<F>(
    mut eval: F,
    x0: DVector<f64>,
    h_inv0: Option<DMatrix<f64>>,
    settings: Settings,
) -> Result<Outcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let k = x0.len();
    let (mut f, mut g) = eval(&x0)?;
    let mut x = x0;
    let seeded = h_inv0.is_some();
    let mut h = h_inv0.unwrap_or_else(|| DMatrix::identity(k, k));
    let mut needs_scaling = !seeded;

    if k == 0 || gradient_small(&g, f, settings.grad_tol) {
        return Ok(Outcome {
            x,
            f,
            g,
            iterations: 0,
            stop: Stop::Gradient,
        });
    }

    for iter in 1..=settings.max_iters {
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope.is_nan() || slope >= 0.0 {
            // Lost descent; restart from steepest descent.
            h = DMatrix::identity(k, k);
            needs_scaling = true;
            dir = -g.clone();
            slope = g.dot(&dir);
        }

        let mut accepted = None;
        let mut alpha = 1.0;
        let dir_norm = dir.norm();
        for _ in 0..MAX_BACKTRACKS {
            if alpha * dir_norm < settings.step_tol {
                return Ok(Outcome {
                    x,
                    f,
                    g,
                    iterations: iter,
                    stop: Stop::Step,
                });
            }
            let trial = &x + &dir * alpha;
            if let Ok((ft, gt)) = eval(&trial) {
                if ft.is_finite() && ft <= f + ARMIJO_C1 * alpha * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= SHRINK;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            return Ok(Outcome {
                x,
                f,
                g,
                iterations: iter,
                stop: Stop::LineSearch,
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let step_norm = s.norm();
        x = x_new;
        f = f_new;
        g = g_new;

        if gradient_small(&g, f, settings.grad_tol) {
            return Ok(Outcome {
                x,
                f,
                g,
                iterations: iter,
                stop: Stop::Gradient,
            });
        }
        if step_norm < settings.step_tol {
            return Ok(Outcome {
                x,
                f,
                g,
                iterations: iter,
                stop: Stop::Step,
            });
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * step_norm * y.norm() {
            if needs_scaling {
                h = DMatrix::identity(k, k) * (sy / y.norm_squared());
                needs_scaling = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ, expanded.
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }

    Ok(Outcome {
        x,
        f,
        g,
        iterations: settings.max_iters,
        stop: Stop::MaxIters,
    })
}
