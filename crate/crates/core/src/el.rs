//! Empirical-likelihood dual solver.
//!
//! For a score matrix `G` (n x r, row i = g_i) the dual problem is the concave
//! maximisation of `sum_i log(1 + lambda' g_i)` over `{lambda : 1 + lambda' g_i > 0}`.
//! Its stationarity condition `n^-1 sum g_i / (1 + lambda' g_i) = 0` is the
//! EL constraint, and the implied weights are `p_i = n^-1 / (1 + lambda' g_i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PepsiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElOptions {
    /// Tolerance on the norm of the averaged dual gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Record the dual objective after every step (costs `n` logarithms per step).
    pub track_objective: bool,
    /// Take up to two extra Newton steps after convergence to push the
    /// residual to rounding level.
    pub polish: bool,
}

impl Default for ElOptions {
    fn default() -> Self {
        ElOptions {
            tol: 1e-10,
            max_iter: 100,
            track_objective: true,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElDualSolution {
    pub lambda: DVector<f64>,
    pub weights: DVector<f64>,
    /// `sum_i log(1 + lambda' g_i)`, never negative.
    pub log_ratio: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Dual objective after each accepted Newton step (starting point first);
    /// empty unless `track_objective` is set.
    pub objective_path: Vec<f64>,
}

/// Solve the dual from `lambda = 0`.
pub fn solve_dual(scores: &DMatrix<f64>, opts: &ElOptions) -> Result<ElDualSolution> {
    solve_dual_from(scores, None, opts)
}

/// Solve the dual from a warm start. An infeasible warm start is replaced by 0.
pub fn solve_dual_from(
    scores: &DMatrix<f64>,
    init: Option<&DVector<f64>>,
    opts: &ElOptions,
) -> Result<ElDualSolution> {
    let (n, r) = scores.shape();
    if n == 0 {
        return Err(PepsiError::Validation("empty score matrix".into()));
    }
    if scores.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "score matrix has non-finite entries".into(),
        ));
    }
    if n <= r {
        log::debug!("EL dual with n={n} <= r={r}; a solution may not exist");
    }
    check_coordinate_hull(scores)?;

    let nf = n as f64;
    let floor = 1.0 / nf;
    let mut lambda = match init {
        Some(l) if l.len() == r && min_denominator(scores, l) >= floor => l.clone(),
        _ => DVector::zeros(r),
    };
    let mut u = scores * &lambda;
    let mut objective = f64::NAN;
    let mut path = Vec::new();
    if opts.track_objective {
        objective = log_sum(&u, 0.0, &u);
        path.push(objective);
    }

    let mut iterations = 0;
    let mut converged = false;
    let (mut grad, mut neg_hess) = grad_and_hessian(scores, &u);
    let mut grad_norm = grad.norm();
    loop {
        if grad_norm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let step = newton_direction(&neg_hess, &grad);
        let gs = scores * &step;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            if min_shifted(&u, alpha, &gs) >= floor {
                let trial_u = {
                    let mut t = u.clone();
                    t.axpy(alpha, &gs, 1.0);
                    t
                };
                let (tg, th) = grad_and_hessian(scores, &trial_u);
                // The objective is concave along the step, so a non-negative
                // slope at the trial point means it has not decreased.
                let mut ok = step.dot(&tg) >= 0.0;
                if !ok {
                    if objective.is_nan() {
                        objective = log_sum(&u, 0.0, &u);
                    }
                    let obj = log_sum(&trial_u, 0.0, &trial_u);
                    ok = obj >= objective - 1e-13 * (1.0 + objective.abs());
                }
                if ok {
                    lambda += &step * alpha;
                    u = trial_u;
                    grad = tg;
                    neg_hess = th;
                    grad_norm = grad.norm();
                    objective = if opts.track_objective {
                        let obj = log_sum(&u, 0.0, &u);
                        path.push(obj);
                        obj
                    } else {
                        f64::NAN
                    };
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if accepted && u.min() > 0.0 {
            // lambda' g_i > 0 for every row: lambda separates zero from the hull.
            let norm = lambda.norm();
            return Err(PepsiError::NoElSolution {
                reason: "a separating direction exists; zero lies outside the convex hull".into(),
                direction: (&lambda / norm).iter().cloned().collect(),
            });
        }
        if !accepted {
            let norm = step.norm().max(f64::MIN_POSITIVE);
            return Err(PepsiError::NoElSolution {
                reason: format!(
                    "line search stalled at the feasibility boundary (gradient norm {grad_norm:.3e})"
                ),
                direction: (step / norm).iter().cloned().collect(),
            });
        }
    }

    if !converged {
        return Err(PepsiError::NotConverged {
            what: "EL dual".into(),
            iterations,
            residual: grad_norm,
            last_iterate: lambda.iter().cloned().collect(),
        });
    }

    // Extra full Newton steps push the residual to rounding level, which
    // tightens the weight-sum identity.
    let mut polish = 0;
    while opts.polish && grad_norm > 1e-14 && polish < 2 {
        polish += 1;
        let step = newton_direction(&neg_hess, &grad);
        let gs = scores * &step;
        if min_shifted(&u, 1.0, &gs) < floor {
            break;
        }
        let trial_u = &u + &gs;
        let (tg, th) = grad_and_hessian(scores, &trial_u);
        let trial_norm = tg.norm();
        if trial_norm < grad_norm {
            lambda += step;
            u = trial_u;
            grad = tg;
            neg_hess = th;
            grad_norm = trial_norm;
        } else {
            break;
        }
    }

    let u = scores * &lambda;
    let weights = u.map(|v| 1.0 / (nf * (1.0 + v)));
    // lambda = 0 is feasible with objective 0, so the maximum is non-negative;
    // anything below is roundoff.
    let log_ratio = log_sum(&u, 0.0, &u).max(0.0);
    Ok(ElDualSolution {
        lambda,
        weights,
        log_ratio,
        converged,
        iterations,
        objective_path: path,
    })
}

/// `p_i = n^-1 (1 + lambda' g_i)^-1`.
pub fn el_weights(lambda: &DVector<f64>, scores: &DMatrix<f64>) -> DVector<f64> {
    let nf = scores.nrows() as f64;
    (scores * lambda).map(|u| 1.0 / (nf * (1.0 + u)))
}

/// `sum_i log(1 + lambda' g_i)`.
pub fn el_logratio(lambda: &DVector<f64>, scores: &DMatrix<f64>) -> f64 {
    dual_objective(scores, lambda)
}

/// `n^-1 sum_i g_i / (1 + lambda' g_i)`; zero at the dual solution.
pub fn dual_residual(lambda: &DVector<f64>, scores: &DMatrix<f64>) -> DVector<f64> {
    let nf = scores.nrows() as f64;
    let inv = (scores * lambda).map(|u| 1.0 / (1.0 + u));
    scores.transpose() * inv / nf
}

/// `sum_i log(1 + u_i + alpha * d_i)`.
fn log_sum(u: &DVector<f64>, alpha: f64, d: &DVector<f64>) -> f64 {
    u.iter()
        .zip(d.iter())
        .map(|(a, b)| (a + alpha * b).ln_1p())
        .sum()
}

fn min_shifted(u: &DVector<f64>, alpha: f64, d: &DVector<f64>) -> f64 {
    u.iter()
        .zip(d.iter())
        .fold(f64::INFINITY, |acc, (a, b)| acc.min(1.0 + a + alpha * b))
}

/// Averaged dual gradient and negative Hessian at linear predictor `u = G lambda`.
fn grad_and_hessian(scores: &DMatrix<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, r) = scores.shape();
    let nf = n as f64;
    let inv: Vec<f64> = u.iter().map(|v| 1.0 / (1.0 + v)).collect();
    // Columns of G scaled by 1 / (1 + u_i).
    let mut scaled = Vec::with_capacity(n * r);
    for col in scores.as_slice().chunks_exact(n) {
        scaled.extend(col.iter().zip(&inv).map(|(g, w)| g * w));
    }
    let col = |a: usize| &scaled[a * n..(a + 1) * n];
    let mut grad = DVector::zeros(r);
    let mut hess = DMatrix::zeros(r, r);
    for a in 0..r {
        let ca = col(a);
        grad[a] = ca.iter().sum::<f64>() / nf;
        for b in 0..=a {
            let v = ca.iter().zip(col(b)).map(|(x, y)| x * y).sum::<f64>() / nf;
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    (grad, hess)
}

fn dual_objective(scores: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
    (scores * lambda).iter().map(|u| u.ln_1p()).sum()
}

fn min_denominator(scores: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
    (scores * lambda)
        .iter()
        .fold(f64::INFINITY, |acc, u| acc.min(1.0 + u))
}

fn newton_direction(neg_hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = neg_hess.clone().cholesky() {
        let step = chol.solve(grad);
        if step.iter().all(|v| v.is_finite()) {
            return step;
        }
    }
    let dim = neg_hess.nrows();
    let ridge = 1e-8 * neg_hess.trace().abs().max(1e-300) / dim.max(1) as f64;
    let regular = neg_hess + DMatrix::identity(dim, dim) * ridge;
    regular
        .cholesky()
        .map(|c| c.solve(grad))
        .unwrap_or_else(|| grad.clone())
}

/// Cheap necessary condition: zero cannot be in the hull if some coordinate
/// has the same strict sign in every row.
fn check_coordinate_hull(scores: &DMatrix<f64>) -> Result<()> {
    let n = scores.nrows();
    for (j, col) in scores.as_slice().chunks_exact(n.max(1)).enumerate() {
        let positive = col.iter().all(|&v| v > 0.0);
        let negative = col.iter().all(|&v| v < 0.0);
        if positive || negative {
            let mut direction = vec![0.0; scores.ncols()];
            direction[j] = if positive { 1.0 } else { -1.0 };
            return Err(PepsiError::NoElSolution {
                reason: format!(
                    "every row has a strictly {} score in coordinate {j}; zero lies outside the convex hull",
                    if positive { "positive" } else { "negative" }
                ),
                direction,
            });
        }
    }
    Ok(())
}
