//! Root of the weighted estimating equation `sum_i w_i f(D_i; beta) = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{PepsiError, Result};
use crate::model_spec::{Design, Family, ModelSpec, PrimaryDataset};

use super::WeightVector;

const NEWTON_MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-10;

pub fn solve_weighted_ee(
    spec: &ModelSpec,
    data: &PrimaryDataset,
    w: &WeightVector,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    data.check_family(spec.family)?;
    let design = Design::new(spec, data.y(), data.x())?;
    solve_design_root(&design, &w.weights, init)
}

/// Weighted root over the free coefficients of an already-built design.
pub(crate) fn solve_design_root(
    design: &Design,
    w: &DVector<f64>,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let n = design.n();
    if w.len() != n {
        return Err(PepsiError::Dimension(format!(
            "{} weights for {n} observations",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "weights contain non-finite values".into(),
        ));
    }
    match design.family {
        Family::Linear => linear_root(design, w),
        Family::Logistic => {
            let start = match init {
                Some(b) => {
                    if b.len() != design.free.len() {
                        return Err(PepsiError::Dimension(format!(
                            "initial value has length {}, expected {}",
                            b.len(),
                            design.free.len()
                        )));
                    }
                    b.clone()
                }
                None => {
                    let first = w[0];
                    if w.iter().all(|&v| v == first) {
                        DVector::zeros(design.free.len())
                    } else {
                        let uniform = DVector::from_element(n, 1.0 / n as f64);
                        logistic_root(design, &uniform, DVector::zeros(design.free.len()))?
                    }
                }
            };
            logistic_root(design, w, start)
        }
    }
}

fn free_gram(design: &Design, w: &DVector<f64>) -> DMatrix<f64> {
    let full = design.weighted_gram(w);
    let f = &design.free;
    DMatrix::from_fn(f.len(), f.len(), |i, j| full[(f[i], f[j])])
}

fn check_rank(gram: &DMatrix<f64>) -> Result<()> {
    let p = gram.nrows();
    let eig = crate::linalg::symmetrize(gram).symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let rank = eig.iter().filter(|v| v.abs() > 1e-12 * max).count();
    if max == 0.0 || rank < p {
        return Err(PepsiError::Singular {
            name: "weighted design".into(),
            detail: format!(
                "weighted Gram matrix has rank {} < {p}",
                if max == 0.0 { 0 } else { rank }
            ),
        });
    }
    Ok(())
}

fn linear_root(design: &Design, w: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = free_gram(design, w);
    check_rank(&gram)?;
    let wy = design.y.component_mul(w);
    let zty = design.z.transpose() * wy;
    let rhs = DVector::from_iterator(design.free.len(), design.free.iter().map(|&j| zty[j]));
    crate::linalg::solve_spd(&gram, &rhs).ok_or_else(|| PepsiError::Singular {
        name: "weighted design".into(),
        detail: "weighted least-squares system could not be solved".into(),
    })
}

fn weighted_score(
    design: &Design,
    w: &DVector<f64>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let full = expand(design, beta);
    let (resid, v) = design.residuals(&full);
    let zs = design.z.transpose() * resid.component_mul(w);
    let s = DVector::from_iterator(design.free.len(), design.free.iter().map(|&j| zs[j]));
    (s, v)
}

fn expand(design: &Design, beta: &DVector<f64>) -> DVector<f64> {
    let mut full = DVector::zeros(design.dim_g());
    for (k, &j) in design.free.iter().enumerate() {
        full[j] = beta[k];
    }
    full
}

/// Damped Newton. With negative weights the weighted information matrix can
/// be indefinite; a Levenberg shift is then added until it factorizes.
fn logistic_root(design: &Design, w: &DVector<f64>, start: DVector<f64>) -> Result<DVector<f64>> {
    let mut beta = start;
    let (mut s, mut v) = weighted_score(design, w, &beta);
    let mut norm = s.norm();
    for _ in 0..NEWTON_MAX_ITER {
        if norm <= SCORE_TOL {
            return Ok(beta);
        }
        let info = free_gram(design, &w.component_mul(&v));
        let step = levenberg_solve(&info, &s)?;
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &beta + &step * alpha;
            let (ts, tv) = weighted_score(design, w, &trial);
            let tn = ts.norm();
            if tn.is_finite() && tn < norm {
                beta = trial;
                s = ts;
                v = tv;
                norm = tn;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if norm <= SCORE_TOL {
        return Ok(beta);
    }
    Err(PepsiError::NotConverged {
        what: "weighted estimating equation (Newton)".into(),
        iterations: NEWTON_MAX_ITER,
        residual: norm,
        last_iterate: beta.iter().cloned().collect(),
    })
}

fn levenberg_solve(info: &DMatrix<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        let step = ch.solve(s);
        if step.iter().all(|x| x.is_finite()) {
            return Ok(step);
        }
    }
    let p = info.nrows();
    let mut mu = 1e-6 * info.trace().abs().max(1e-12) / p as f64;
    for _ in 0..60 {
        let shifted = info + DMatrix::identity(p, p) * mu;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.solve(s));
        }
        mu *= 10.0;
    }
    Err(PepsiError::Singular {
        name: "weighted information matrix".into(),
        detail: "no positive-definite shift found".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::Method;
    use approx::assert_relative_eq;

    fn intercept_only(y: &[f64]) -> PrimaryDataset {
        PrimaryDataset::new(DVector::from_row_slice(y), DMatrix::zeros(y.len(), 0)).unwrap()
    }

    #[test]
    fn weighted_mean_for_intercept_only() {
        let data = intercept_only(&[0.0, 1.0]);
        let spec = ModelSpec::new(Family::Linear, 0);
        let w = WeightVector::new(DVector::from_vec(vec![0.75, 0.25]), Method::Psi);
        let b = solve_weighted_ee(&spec, &data, &w, None).unwrap();
        assert_relative_eq!(b[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn logistic_symmetric_intercept() {
        let data = intercept_only(&[0.0, 1.0]);
        let spec = ModelSpec::new(Family::Logistic, 0);
        let w = WeightVector::uniform(2, Method::Naive);
        let b = solve_weighted_ee(&spec, &data, &w, None).unwrap();
        assert!(b[0].abs() < 1e-12);
    }

    #[test]
    fn logistic_weighted_matches_log_odds() {
        let data = intercept_only(&[0.0, 1.0, 1.0]);
        let spec = ModelSpec::new(Family::Logistic, 0);
        let w = WeightVector::new(DVector::from_vec(vec![0.5, 0.25, 0.25]), Method::Psi);
        let b = solve_weighted_ee(&spec, &data, &w, None).unwrap();
        // weighted mean of y is 0.5
        assert!(b[0].abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let data = PrimaryDataset::new(DVector::from_vec(vec![1.0, 2.0, 3.0]), x).unwrap();
        let spec = ModelSpec::new(Family::Linear, 2);
        let err = solve_weighted_ee(&spec, &data, &WeightVector::uniform(3, Method::Naive), None)
            .unwrap_err();
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn noiseless_linear_recovers_generator() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = x.column(0).map(|v| 2.0 - 0.5 * v);
        let data = PrimaryDataset::new(y, x).unwrap();
        let spec = ModelSpec::new(Family::Linear, 1);
        let b = solve_weighted_ee(&spec, &data, &WeightVector::uniform(4, Method::Naive), None)
            .unwrap();
        assert_relative_eq!(b[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], -0.5, epsilon = 1e-12);
    }
}
