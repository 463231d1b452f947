//! Penalized empirical likelihood for the secondary working models.
//!
//! Minimises `l(theta) + n * sum_j scad_tau(|theta_j|)` where `l` is the EL
//! log-ratio of the secondary scores. Each outer iteration re-solves the dual,
//! takes one damped Newton step using a Gauss-Newton curvature for `l` and the
//! local quadratic approximation of the penalty, then hard-zeroes coordinates
//! whose magnitude falls to `gamma` or below. Zeroed coordinates stay frozen
//! for the rest of the fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::el::{solve_dual, solve_dual_from, ElDualSolution, ElOptions};
use crate::error::{PepsiError, Result};
use crate::integrators::weighted_ee::solve_design_root;
use crate::model_spec::{Design, ModelSpec, SecondaryDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// SCAD shape parameter.
    pub a: f64,
    /// Explicit tuning grid; `None` uses [`default_tau_grid`].
    pub tau_grid: Option<Vec<f64>>,
    pub n_tau: usize,
    /// Grid span as multiples of `sqrt(log p / n) * sd(y)`.
    pub tau_span: (f64, f64),
    /// Hard threshold below which a coefficient is set to exactly zero.
    pub gamma: f64,
    /// BIC constant; `None` uses `max(log log p, 1)`.
    pub bic_constant: Option<f64>,
    pub max_outer: usize,
    pub tol: f64,
    pub el: ElOptions,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            a: 3.7,
            tau_grid: None,
            n_tau: 20,
            tau_span: (0.01, 2.0),
            gamma: 1e-3,
            bic_constant: None,
            max_outer: 200,
            tol: 1e-8,
            el: ElOptions::default(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 2.0) {
            return Err(PepsiError::InvalidArgument(format!(
                "SCAD a must exceed 2, got {}",
                self.a
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(PepsiError::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if let Some(grid) = &self.tau_grid {
            if grid.is_empty() {
                return Err(PepsiError::InvalidArgument("tau grid is empty".into()));
            }
            if grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                return Err(PepsiError::InvalidArgument(
                    "tau grid values must be positive".into(),
                ));
            }
        } else if self.n_tau == 0
            || !(self.tau_span.0 > 0.0)
            || !(self.tau_span.1 >= self.tau_span.0)
        {
            return Err(PepsiError::InvalidArgument(
                "invalid default tau grid settings".into(),
            ));
        }
        Ok(())
    }
}

/// SCAD penalty value and derivative at `t >= 0`.
pub fn scad(t: f64, tau: f64, a: f64) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(PepsiError::InvalidArgument(format!(
            "SCAD argument must be >= 0, got {t}"
        )));
    }
    if !(tau > 0.0) || !(a > 2.0) {
        return Err(PepsiError::InvalidArgument(format!(
            "SCAD needs tau > 0 and a > 2 (tau={tau}, a={a})"
        )));
    }
    Ok(scad_unchecked(t, tau, a))
}

fn scad_unchecked(t: f64, tau: f64, a: f64) -> (f64, f64) {
    if t <= tau {
        (tau * t, tau)
    } else if t <= a * tau {
        (
            (2.0 * a * tau * t - t * t - tau * tau) / (2.0 * (a - 1.0)),
            (a * tau - t) / (a - 1.0),
        )
    } else {
        ((a + 1.0) * tau * tau / 2.0, 0.0)
    }
}

/// `max(log log p, 1)`.
pub fn bic_constant(p: usize) -> f64 {
    let p = p as f64;
    if p <= std::f64::consts::E {
        return 1.0;
    }
    p.ln().ln().max(1.0)
}

/// 20 log-spaced points (by default) on `[0.01, 2] * sqrt(log p / n) * sd(y)`.
pub fn default_tau_grid(
    secondary: &SecondaryDataset,
    spec: &ModelSpec,
    cfg: &PenaltyConfig,
) -> Vec<f64> {
    let n = secondary.n() as f64;
    let p = spec.dim_theta().max(2) as f64;
    let y = secondary.y();
    let mean = y.mean();
    let sd = if y.len() > 1 {
        (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        1.0
    };
    let scale = if sd > 0.0 { sd } else { 1.0 };
    let base = (p.ln() / n).sqrt() * scale;
    let (lo, hi) = cfg.tau_span;
    let k = cfg.n_tau;
    (0..k)
        .map(|i| {
            let frac = if k == 1 {
                0.0
            } else {
                i as f64 / (k - 1) as f64
            };
            base * (lo.ln() + frac * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SecondaryFit {
    /// Index of the secondary outcome this fit belongs to.
    pub outcome: usize,
    pub spec: ModelSpec,
    /// Free coefficients of `spec` (exact zeros where thresholded).
    pub theta_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    /// Positions in `theta_hat` that were set to zero.
    pub zero_index_set: Vec<usize>,
    pub tau_selected: f64,
    pub bic_value: f64,
    pub log_ratio: f64,
    pub q_hat: usize,
    pub converged: bool,
    /// Every free coefficient was zeroed.
    pub degenerate: bool,
    pub iterations: usize,
    /// Penalized objective at the start, after each accepted Newton step and
    /// after each thresholding event.
    pub objective_path: Vec<f64>,
    /// Positions in `objective_path` that follow a thresholding event rather
    /// than a Newton step.
    pub threshold_steps: Vec<usize>,
}

impl SecondaryFit {
    pub fn theta_full(&self) -> DVector<f64> {
        self.spec
            .expand(&self.theta_hat)
            .expect("theta_hat matches its spec")
    }

    /// Just-identified working model with no detected zeros: carries no
    /// information for the primary analysis.
    pub fn is_uninformative(&self) -> bool {
        !self.spec.is_over_identified() && self.q_hat == 0
    }
}

/// Row selector for the zeroed coordinates (q x p).
pub fn zero_pattern(fit: &SecondaryFit) -> DMatrix<f64> {
    let p = fit.theta_hat.len();
    let mut h = DMatrix::zeros(fit.zero_index_set.len(), p);
    for (row, &j) in fit.zero_index_set.iter().enumerate() {
        h[(row, j)] = 1.0;
    }
    h
}

/// Penalized EL fit at a single tuning value.
pub fn pel_fit(
    secondary: &SecondaryDataset,
    spec: &ModelSpec,
    tau: f64,
    cfg: &PenaltyConfig,
) -> Result<SecondaryFit> {
    if !(tau > 0.0) {
        return Err(PepsiError::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    cfg.validate()?;
    let design = Design::new(spec, secondary.y(), secondary.x())?;
    let init = initial_theta(&design)?;
    let mut fit = run_pel(&design, spec, init, Some(tau), cfg)?;
    fit.outcome = secondary.index;
    Ok(fit)
}

/// Unpenalized EL estimate over the free coefficients (used for VIS).
pub fn el_fit(
    secondary: &SecondaryDataset,
    spec: &ModelSpec,
    cfg: &PenaltyConfig,
) -> Result<SecondaryFit> {
    let design = Design::new(spec, secondary.y(), secondary.x())?;
    let init = initial_theta(&design)?;
    let mut fit = run_pel(&design, spec, init, None, cfg)?;
    fit.outcome = secondary.index;
    let c = cfg
        .bic_constant
        .unwrap_or_else(|| bic_constant(spec.dim_theta()));
    fit.bic_value = 2.0 * fit.log_ratio + c * (secondary.n() as f64).ln() * spec.dim_theta() as f64;
    Ok(fit)
}

/// Fit every tuning value and keep the smallest BIC; ties go to the larger tau.
pub fn bic_select(
    secondary: &SecondaryDataset,
    spec: &ModelSpec,
    cfg: &PenaltyConfig,
) -> Result<SecondaryFit> {
    cfg.validate()?;
    let mut grid = match &cfg.tau_grid {
        Some(g) => g.clone(),
        None => default_tau_grid(secondary, spec, cfg),
    };
    grid.sort_by(|a, b| a.total_cmp(b));
    let design = Design::new(spec, secondary.y(), secondary.x())?;
    let init = initial_theta(&design)?;
    let n = secondary.n() as f64;
    let c = cfg
        .bic_constant
        .unwrap_or_else(|| bic_constant(spec.dim_theta()));

    let mut best: Option<SecondaryFit> = None;
    let mut failures = Vec::new();
    for &tau in &grid {
        match run_pel(&design, spec, init.clone(), Some(tau), cfg) {
            Ok(mut fit) => {
                fit.outcome = secondary.index;
                let nonzero = fit.theta_hat.len() - fit.q_hat;
                fit.bic_value = 2.0 * fit.log_ratio + c * n.ln() * nonzero as f64;
                let better = best.as_ref().is_none_or(|b| fit.bic_value <= b.bic_value);
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => failures.push((tau, e.to_string())),
        }
    }
    best.ok_or(PepsiError::TuningFailed(failures))
}

fn initial_theta(design: &Design) -> Result<DVector<f64>> {
    let uniform = DVector::from_element(design.n(), 1.0 / design.n() as f64);
    solve_design_root(design, &uniform, None)
}

struct DualState {
    full: DVector<f64>,
    scores: DMatrix<f64>,
    dual: ElDualSolution,
    objective: f64,
}

fn penalty_sum(theta: &DVector<f64>, tau: Option<f64>, a: f64) -> f64 {
    match tau {
        Some(t) => theta.iter().map(|v| scad_unchecked(v.abs(), t, a).0).sum(),
        None => 0.0,
    }
}

fn evaluate(
    design: &Design,
    spec: &ModelSpec,
    theta: &DVector<f64>,
    warm: Option<&DVector<f64>>,
    tau: Option<f64>,
    cfg: &PenaltyConfig,
) -> Result<DualState> {
    let full = spec.expand(theta)?;
    let scores = design.scores(&full);
    let opts = ElOptions {
        track_objective: false,
        polish: false,
        ..cfg.el
    };
    let dual = solve_dual_from(&scores, warm, &opts)?;
    let objective = dual.log_ratio + design.n() as f64 * penalty_sum(theta, tau, cfg.a);
    Ok(DualState {
        full,
        scores,
        dual,
        objective,
    })
}

fn run_pel(
    design: &Design,
    spec: &ModelSpec,
    init: DVector<f64>,
    tau: Option<f64>,
    cfg: &PenaltyConfig,
) -> Result<SecondaryFit> {
    let n = design.n();
    let nf = n as f64;
    let p = init.len();
    let mut theta = init;
    let mut active = vec![true; p];
    let mut state = evaluate(design, spec, &theta, None, tau, cfg)?;
    let mut path = vec![state.objective];
    let mut threshold_steps = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let free = &design.free;
    while iterations < cfg.max_outer {
        let act: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
        if act.is_empty() {
            converged = true;
            break;
        }
        iterations += 1;

        // Gradient of l over the active coordinates (envelope theorem):
        // sum_i w_i J_i' lambda with J_i = -v_i z_i z_i'.
        let lambda = &state.dual.lambda;
        let (_, curv) = design.residuals(&state.full);
        let z_lambda = &design.z * lambda;
        let mut coef = DVector::zeros(n);
        for i in 0..n {
            let w = state.dual.weights[i] * nf;
            coef[i] = -w * curv[i] * z_lambda[i];
        }
        let full_grad = design.z.transpose() * &coef;

        // Gauss-Newton curvature n B' A^-1 B.
        let jac_full = design.mean_jacobian_full(&state.full);
        let cols: Vec<usize> = act.iter().map(|&j| free[j]).collect();
        let b = crate::linalg::select_columns(&jac_full, &cols);
        let a_mat = state.scores.transpose() * &state.scores / nf;
        let a_inv_b = match a_mat.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                let (inv, _) = crate::linalg::spd_inverse_ridged(&a_mat, "A (PEL curvature)")?;
                &inv * &b
            }
        };
        let mut hess = b.transpose() * a_inv_b * nf;

        let mut rhs = DVector::zeros(act.len());
        for (k, &j) in act.iter().enumerate() {
            rhs[k] = -full_grad[free[j]];
        }
        if let Some(t) = tau {
            for (k, &j) in act.iter().enumerate() {
                let mag = theta[j].abs();
                let d = scad_unchecked(mag, t, cfg.a).1 / mag.max(1e-8);
                hess[(k, k)] += nf * d;
                rhs[k] -= nf * d * theta[j];
            }
        }
        let step = match crate::linalg::solve_spd(&hess, &rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                return Err(PepsiError::Singular {
                    name: "PEL Newton system".into(),
                    detail: "could not solve for the update".into(),
                })
            }
        };

        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, DualState)> = None;
        for _ in 0..40 {
            let mut trial = theta.clone();
            for (k, &j) in act.iter().enumerate() {
                trial[j] += alpha * step[k];
            }
            if let Ok(st) = evaluate(design, spec, &trial, Some(&state.dual.lambda), tau, cfg) {
                if st.objective <= state.objective + 1e-12 * (1.0 + state.objective.abs()) {
                    accepted = Some((trial, st));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((new_theta, new_state)) = accepted else {
            // No descent available from here.
            converged = true;
            break;
        };
        let change = new_theta
            .iter()
            .zip(theta.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        theta = new_theta;
        state = new_state;
        path.push(state.objective);

        let mut zeroed = false;
        if tau.is_some() {
            for j in 0..p {
                if active[j] && theta[j].abs() <= cfg.gamma {
                    theta[j] = 0.0;
                    active[j] = false;
                    zeroed = true;
                }
            }
        }
        if zeroed {
            state = evaluate(design, spec, &theta, Some(&state.dual.lambda), tau, cfg)?;
            threshold_steps.push(path.len());
            path.push(state.objective);
        } else if change < cfg.tol {
            converged = true;
            break;
        }
    }

    // Fresh dual solve at the final estimate.
    let full = spec.expand(&theta)?;
    let scores = design.scores(&full);
    let dual = solve_dual(&scores, &cfg.el)?;
    let zero_index_set: Vec<usize> = (0..p).filter(|&j| !active[j]).collect();
    let q_hat = zero_index_set.len();
    Ok(SecondaryFit {
        outcome: 0,
        spec: spec.clone(),
        theta_hat: theta,
        lambda_hat: dual.lambda.clone(),
        zero_index_set,
        tau_selected: tau.unwrap_or(0.0),
        bic_value: f64::NAN,
        log_ratio: dual.log_ratio,
        q_hat,
        converged,
        degenerate: q_hat == p,
        iterations,
        objective_path: path,
        threshold_steps,
    })
}
