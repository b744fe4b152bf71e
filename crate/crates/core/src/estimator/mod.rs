//! Minimization of the smoothed criteria.
//!
//! For the continuous model the criterion is exactly quadratic in the
//! linear coefficients once the plane is fixed: writing `a = β` and
//! `b = β + δ` it splits into two weighted least-squares problems with
//! weights `1 - K_i` and `K_i`. The linear block is therefore solved in
//! closed form and only `ψ̃` is searched, by BFGS from several starts.

mod bfgs;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    grad_smoothed_continuous, hessian_binary, hessian_smoothed_continuous, plane_index, row_dot,
    Bandwidth, BinaryDataset, ContinuousDataset, PsiBinary, ThetaContinuous,
};
use crate::numerics::{cdf, is_positive_definite, pdf, solve_sym, solve_sym_vec};

/// Bandwidth multipliers of the continuation ladder, coarse to fine.
pub const CONTINUATION_LADDER: [f64; 4] = [8.0, 4.0, 2.0, 1.0];

/// Recommended lower bound on `n·σ`.
pub const MIN_EFFECTIVE_SAMPLE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub continuation: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer_iters: 200,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            n_starts: 16,
            seed: 0,
            continuation: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters < 1 {
            return Err(Error::invalid("max_outer_iters must be >= 1"));
        }
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.n_starts < 1 {
            return Err(Error::invalid("n_starts must be >= 1"));
        }
        Ok(())
    }

    fn settings(&self) -> bfgs::Settings {
        bfgs::Settings {
            max_iters: self.max_outer_iters,
            grad_tol: self.grad_tol,
            step_tol: self.step_tol,
        }
    }
}

/// Outcome of one start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start_index: usize,
    pub psi_tilde_start: Vec<f64>,
    pub loss: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub theta: T,
    pub loss: f64,
    /// Norm of the gradient over all free parameters.
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start_index: usize,
    pub bandwidth_used: Bandwidth,
    pub warnings: Vec<String>,
    pub trace: Vec<StartTrace>,
}

/// Warning text for bandwidths below the `nσ ≥ 30` recommendation.
pub fn bandwidth_warning(n: usize, bw: &Bandwidth) -> Option<String> {
    let eff = n as f64 * bw.sigma();
    (eff < MIN_EFFECTIVE_SAMPLE).then(|| {
        format!(
            "bandwidth guard: n*sigma = {eff:.4} < {MIN_EFFECTIVE_SAMPLE}; \
             choose sigma with n*sigma >= {MIN_EFFECTIVE_SAMPLE} for a reliable normal approximation"
        )
    })
}

fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn iqr(column: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = column.collect();
    v.sort_by(f64::total_cmp);
    (quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)).max(1e-12)
}

/// Half-widths of the start box: coordinate `j` of `ψ̃` is drawn from
/// `±3·IQR(Q₁)/IQR(Q_j)`, the range that moves the plane across the bulk
/// of the data.
pub fn start_box(q: &DMatrix<f64>) -> Vec<f64> {
    let anchor = iqr(q.column(0).iter().copied());
    (1..q.ncols())
        .map(|j| 3.0 * anchor / iqr(q.column(j).iter().copied()))
        .collect()
}

/// Deterministic list of starting values for `ψ̃`; the first is zero.
pub fn make_starts(q: &DMatrix<f64>, n_starts: usize, seed: u64) -> Vec<DVector<f64>> {
    let m = q.ncols().saturating_sub(1);
    let half = start_box(q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(n_starts);
    starts.push(DVector::zeros(m));
    while starts.len() < n_starts {
        starts.push(DVector::from_fn(m, |j, _| rng.gen_range(-half[j]..=half[j])));
    }
    starts.truncate(n_starts.max(1));
    starts
}

fn degenerate(err: Error) -> Error {
    match err {
        Error::Singular { .. } => Error::DegenerateRegime,
        other => other,
    }
}

/// Closed-form minimizer of the smoothed continuous criterion over `(β, δ)`
/// for a fixed plane.
pub fn profile_linear(
    psi_tilde: &DVector<f64>,
    data: &ContinuousDataset,
    bw: &Bandwidth,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if psi_tilde.len() + 1 != data.d() {
        return Err(Error::shape(format!(
            "psi_tilde has length {}, data needs {}",
            psi_tilde.len(),
            data.d() - 1
        )));
    }
    let mut scratch = Vec::new();
    let (beta, delta) = weighted_fits(psi_tilde, data, bw.sigma(), &mut scratch)?;
    Ok((beta, delta))
}

/// Fills `z` with `q_iᵀψ/σ` and returns `(a, b - a)`.
fn weighted_fits(
    psi_tilde: &DVector<f64>,
    data: &ContinuousDataset,
    sigma: f64,
    z: &mut Vec<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, p) = (data.n(), data.p());
    let (x, y, q) = (data.x(), data.y(), data.q());
    z.clear();
    z.extend((0..n).map(|i| plane_index(q, i, psi_tilde) / sigma));

    let mut g0 = DMatrix::zeros(p, p);
    let mut g1 = DMatrix::zeros(p, p);
    let mut h0 = DVector::zeros(p);
    let mut h1 = DVector::zeros(p);
    for i in 0..n {
        let w1 = cdf(z[i]);
        let w0 = cdf(-z[i]);
        for a in 0..p {
            let xa = x[(i, a)];
            h0[a] += w0 * xa * y[i];
            h1[a] += w1 * xa * y[i];
            for b in a..p {
                let xx = xa * x[(i, b)];
                g0[(a, b)] += w0 * xx;
                g1[(a, b)] += w1 * xx;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g0[(a, b)] = g0[(b, a)];
            g1[(a, b)] = g1[(b, a)];
        }
    }
    let (a, _) = solve_sym_vec(&g0, &h0).map_err(degenerate)?;
    let (b, _) = solve_sym_vec(&g1, &h1).map_err(degenerate)?;
    let delta = &b - &a;
    Ok((a, delta))
}

/// Profiled objective and its gradient in `ψ̃` (envelope theorem: the
/// linear-block gradient vanishes at the profiled solution).
struct ProfiledEval {
    loss: f64,
    grad: DVector<f64>,
    beta: DVector<f64>,
    delta: DVector<f64>,
}

fn profiled_eval(
    psi_tilde: &DVector<f64>,
    data: &ContinuousDataset,
    sigma: f64,
    z: &mut Vec<f64>,
) -> Result<ProfiledEval> {
    let (n, d) = (data.n(), data.d());
    let (x, y, q) = (data.x(), data.y(), data.q());
    let (beta, delta) = weighted_fits(psi_tilde, data, sigma, z)?;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(d - 1);
    for i in 0..n {
        let r = y[i] - row_dot(x, i, &beta);
        let u = row_dot(x, i, &delta);
        let bracket = -2.0 * r * u + u * u;
        loss += r * r + bracket * cdf(z[i]);
        let w = bracket * pdf(z[i]);
        for j in 1..d {
            grad[j - 1] += w * q[(i, j)];
        }
    }
    Ok(ProfiledEval {
        loss: loss / n as f64,
        grad: grad / (n as f64 * sigma),
        beta,
        delta,
    })
}

/// Inverse of the profiled Hessian `H_ψψ - H_ψγ H_γγ⁻¹ H_γψ` when it is
/// positive definite.
fn profiled_curvature(theta: &ThetaContinuous, data: &ContinuousDataset, bw: &Bandwidth) -> Option<DMatrix<f64>> {
    let m = theta.psi_tilde.len();
    if m == 0 {
        return None;
    }
    let h = hessian_smoothed_continuous(theta, data, bw).ok()?;
    let g = 2 * data.p();
    let hgg = h.view((0, 0), (g, g)).into_owned();
    let hgp = h.view((0, g), (g, m)).into_owned();
    let hpp = h.view((g, g), (m, m)).into_owned();
    let sol = solve_sym(&hgg, &hgp).ok()?;
    let schur = hpp - hgp.transpose() * sol.x;
    if is_positive_definite(&schur) {
        schur.try_inverse()
    } else {
        None
    }
}

struct Candidate<T> {
    theta: T,
    loss: f64,
    converged: bool,
    iterations: usize,
}

fn better<T>(a: &Candidate<T>, b: &Candidate<T>) -> bool {
    a.loss < b.loss
}

/// Runs the outer search from one start at the requested bandwidth,
/// optionally through the continuation ladder. Returns the final `ψ̃`.
fn search<F, S>(
    start: &DVector<f64>,
    bw: &Bandwidth,
    opts: &FitOptions,
    mut eval_at: F,
    mut seed_at: S,
) -> Result<(bfgs::Outcome, usize)>
where
    F: FnMut(&DVector<f64>, f64) -> Result<(f64, DVector<f64>)>,
    S: FnMut(&DVector<f64>, &Bandwidth) -> Option<DMatrix<f64>>,
{
    let run = |x0: DVector<f64>, rung: &Bandwidth, eval_at: &mut F, seed_at: &mut S| {
        let h0 = seed_at(&x0, rung);
        let sigma = rung.sigma();
        bfgs::minimize(|x| eval_at(x, sigma), x0, h0, opts.settings())
    };

    let cold = run(start.clone(), bw, &mut eval_at, &mut seed_at);
    if !opts.continuation {
        let out = cold?;
        let it = out.iterations;
        return Ok((out, it));
    }

    let mut x0 = start.clone();
    let mut total = 0;
    let mut ladder = None;
    for &factor in CONTINUATION_LADDER.iter() {
        let rung = bw.scaled(factor)?;
        match run(x0.clone(), &rung, &mut eval_at, &mut seed_at) {
            Ok(out) => {
                total += out.iterations;
                x0 = out.x.clone();
                ladder = Some(out);
            }
            Err(_) => {
                ladder = None;
                break;
            }
        }
    }
    let ladder = ladder.map(|out| (out, total));

    match (ladder, cold) {
        (Some((l, lt)), Ok(c)) => {
            // Same order as the selection across starts: converged first,
            // then lower loss.
            let cold_first = (c.stop.converged(), -c.f) > (l.stop.converged(), -l.f);
            if cold_first {
                let it = c.iterations;
                Ok((c, it + lt))
            } else {
                Ok((l, lt + c.iterations))
            }
        }
        (Some((l, lt)), Err(_)) => Ok((l, lt)),
        (None, Ok(c)) => {
            let it = c.iterations;
            Ok((c, it))
        }
        (None, Err(e)) => Err(e),
    }
}

fn select<T: Clone>(
    candidates: Vec<(usize, Candidate<T>)>,
    mut warnings: Vec<String>,
    trace: Vec<StartTrace>,
    bw: &Bandwidth,
    grad_norm_of: impl Fn(&T) -> Result<f64>,
) -> Result<FitResult<T>> {
    let any_converged = candidates.iter().any(|(_, c)| c.converged);
    let mut best: Option<&(usize, Candidate<T>)> = None;
    for entry in candidates.iter() {
        if any_converged && !entry.1.converged {
            continue;
        }
        match best {
            Some(b) if !better(&entry.1, &b.1) => {}
            _ => best = Some(entry),
        }
    }
    let Some((idx, cand)) = best else {
        return Err(Error::NoStart(
            trace
                .iter()
                .filter_map(|t| t.error.clone())
                .next()
                .unwrap_or_else(|| "every start failed".into()),
        ));
    };
    if !any_converged {
        warnings.push(format!(
            "no start converged; returning the lowest-loss candidate (start {idx})"
        ));
    }
    Ok(FitResult {
        theta: cand.theta.clone(),
        loss: cand.loss,
        grad_norm: grad_norm_of(&cand.theta)?,
        converged: cand.converged,
        iterations: cand.iterations,
        start_index: *idx,
        bandwidth_used: *bw,
        warnings,
        trace,
    })
}

/// Fits the continuous change-plane model.
pub fn fit_continuous(
    data: &ContinuousDataset,
    bw: &Bandwidth,
    opts: &FitOptions,
) -> Result<FitResult<ThetaContinuous>> {
    opts.validate()?;
    let mut warnings: Vec<String> = bandwidth_warning(data.n(), bw).into_iter().collect();
    let starts = make_starts(data.q(), opts.n_starts, opts.seed);
    let mut scratch = Vec::with_capacity(data.n());
    let mut candidates = Vec::new();
    let mut trace = Vec::new();

    for (idx, start) in starts.iter().enumerate() {
        let outcome = search(
            start,
            bw,
            opts,
            |x, sigma| profiled_eval(x, data, sigma, &mut scratch).map(|e| (e.loss, e.grad)),
            |x, rung| {
                let (beta, delta) = profile_linear(x, data, rung).ok()?;
                let theta = ThetaContinuous {
                    beta,
                    delta,
                    psi_tilde: x.clone(),
                };
                profiled_curvature(&theta, data, rung)
            },
        );
        let outcome = outcome.and_then(|(out, iterations)| {
            let e = profiled_eval(&out.x, data, bw.sigma(), &mut scratch)?;
            Ok((out, iterations, e))
        });
        match outcome {
            Ok((out, iterations, e)) => {
                let converged = out.stop.converged();
                if out.stop == bfgs::Stop::Step && !gradient_ok(&out.g, out.f, opts) {
                    warnings.push(format!(
                        "start {idx}: stopped on step tolerance with |grad| = {:.3e}",
                        out.g.norm()
                    ));
                }
                trace.push(StartTrace {
                    start_index: idx,
                    psi_tilde_start: start.as_slice().to_vec(),
                    loss: Some(e.loss),
                    converged,
                    iterations,
                    error: None,
                });
                candidates.push((
                    idx,
                    Candidate {
                        theta: ThetaContinuous {
                            beta: e.beta,
                            delta: e.delta,
                            psi_tilde: out.x,
                        },
                        loss: e.loss,
                        converged,
                        iterations,
                    },
                ));
            }
            Err(err) => {
                warnings.push(format!("start {idx} skipped: {err}"));
                trace.push(StartTrace {
                    start_index: idx,
                    psi_tilde_start: start.as_slice().to_vec(),
                    loss: None,
                    converged: false,
                    iterations: 0,
                    error: Some(err.to_string()),
                });
            }
        }
    }

    select(candidates, warnings, trace, bw, |theta| {
        Ok(grad_smoothed_continuous(theta, data, bw)?.norm())
    })
}

fn gradient_ok(g: &DVector<f64>, f: f64, opts: &FitOptions) -> bool {
    g.norm() <= opts.grad_tol * (1.0 + f.abs())
}

/// Smoothed binary criterion and score in one pass.
fn binary_eval(psi_tilde: &DVector<f64>, gamma: f64, data: &BinaryDataset, sigma: f64) -> (f64, DVector<f64>) {
    let (n, d) = (data.n(), data.d());
    let (y, q) = (data.y(), data.q());
    let mut loss = 0.0;
    let mut grad = DVector::zeros(d - 1);
    for i in 0..n {
        let z = plane_index(q, i, psi_tilde) / sigma;
        let w = y[i] - gamma;
        loss += w * cdf(-z);
        let s = w * pdf(z);
        for j in 1..d {
            grad[j - 1] += s * q[(i, j)];
        }
    }
    (loss / n as f64, grad * (-1.0 / (n as f64 * sigma)))
}

/// Resolves `γ`: the supplied value, or the label mean.
pub fn resolve_gamma(data: &BinaryDataset, gamma: Option<f64>) -> Result<f64> {
    match gamma {
        Some(g) if g > 0.0 && g < 1.0 => Ok(g),
        Some(g) => Err(Error::invalid(format!("gamma must lie in (0, 1), got {g}"))),
        None => {
            let mean = data.mean_response();
            if mean <= 0.0 || mean >= 1.0 {
                Err(Error::UninformativeLabels(mean))
            } else {
                Ok(mean)
            }
        }
    }
}

/// Fits the binary change-plane model. `gamma` defaults to the label mean.
pub fn fit_binary(
    data: &BinaryDataset,
    bw: &Bandwidth,
    gamma: Option<f64>,
    opts: &FitOptions,
) -> Result<FitResult<PsiBinary>> {
    opts.validate()?;
    let gamma = resolve_gamma(data, gamma)?;
    let mut warnings: Vec<String> = bandwidth_warning(data.n(), bw).into_iter().collect();
    let starts = make_starts(data.q(), opts.n_starts, opts.seed);
    let mut candidates = Vec::new();
    let mut trace = Vec::new();

    for (idx, start) in starts.iter().enumerate() {
        let outcome = search(
            start,
            bw,
            opts,
            |x, sigma| Ok(binary_eval(x, gamma, data, sigma)),
            |x, rung| {
                let psi = PsiBinary {
                    psi_tilde: x.clone(),
                    gamma,
                };
                let h = hessian_binary(&psi, data, rung).ok()?;
                if is_positive_definite(&h) {
                    h.try_inverse()
                } else {
                    None
                }
            },
        );
        match outcome {
            Ok((out, iterations)) => {
                let converged = out.stop.converged();
                let (loss, _) = binary_eval(&out.x, gamma, data, bw.sigma());
                if out.stop == bfgs::Stop::Step && !gradient_ok(&out.g, out.f, opts) {
                    warnings.push(format!(
                        "start {idx}: stopped on step tolerance with |grad| = {:.3e}",
                        out.g.norm()
                    ));
                }
                trace.push(StartTrace {
                    start_index: idx,
                    psi_tilde_start: start.as_slice().to_vec(),
                    loss: Some(loss),
                    converged,
                    iterations,
                    error: None,
                });
                candidates.push((
                    idx,
                    Candidate {
                        theta: PsiBinary {
                            psi_tilde: out.x,
                            gamma,
                        },
                        loss,
                        converged,
                        iterations,
                    },
                ));
            }
            Err(err) => {
                warnings.push(format!("start {idx} skipped: {err}"));
                trace.push(StartTrace {
                    start_index: idx,
                    psi_tilde_start: start.as_slice().to_vec(),
                    loss: None,
                    converged: false,
                    iterations: 0,
                    error: Some(err.to_string()),
                });
            }
        }
    }

    select(candidates, warnings, trace, bw, |psi| {
        Ok(binary_eval(&psi.psi_tilde, psi.gamma, data, bw.sigma()).1.norm())
    })
}
