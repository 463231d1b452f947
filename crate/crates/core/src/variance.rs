//! Plug-in covariance estimators, Wald inference and the sample-size rule.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PepsiError, Result};
use crate::integrators::Method;
use crate::linalg::{guarded_inverse, symmetric_eigen_desc, symmetrize};
use crate::model_spec::{Design, ModelSpec, PrimaryDataset};

/// Variance reduction applied to the naive middle matrix.
#[derive(Debug, Clone)]
pub enum Reduction {
    None,
    /// `Sigma - Lambda M Lambda'`.
    Projector(DMatrix<f64>),
    Mixture(Mixture),
}

/// Averaging-scheme influence `f - sum_m w_m Lambda_m Q_m g_m`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub offsets: Vec<usize>,
    pub projectors: Vec<DMatrix<f64>>,
    /// `n^-1 sum G G'` over all stacked scores.
    pub second_moment: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub n: usize,
    pub gamma: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// `n^-1 sum f G'` (p0 x R); zero columns without secondary data.
    pub lambda: DMatrix<f64>,
    pub reduction: Reduction,
}

/// `Gamma = n^-1 sum df/dbeta`, `Sigma = n^-1 sum f f'`, `Lambda = n^-1 sum f G'`
/// at `beta_hat`; `scores` is the stacked secondary score matrix.
pub fn estimate_components(
    spec: &ModelSpec,
    primary: &PrimaryDataset,
    beta_hat: &DVector<f64>,
    scores: Option<&DMatrix<f64>>,
) -> Result<VarianceComponents> {
    let design = Design::new(spec, primary.y(), primary.x())?;
    let full = spec.expand(beta_hat)?;
    if full.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "coefficient estimate is not finite".into(),
        ));
    }
    let n = design.n();
    let nf = n as f64;
    let jac = design.mean_jacobian(&full);
    let gamma = DMatrix::from_fn(design.free.len(), design.free.len(), |i, j| {
        jac[(design.free[i], j)]
    });
    let f_full = design.scores(&full);
    let f = crate::linalg::select_columns(&f_full, &design.free);
    let sigma = symmetrize(&(f.transpose() * &f / nf));
    let lambda = match scores {
        Some(g) => {
            if g.nrows() != n {
                return Err(PepsiError::Dimension(format!(
                    "secondary scores have {} rows, primary has {n}",
                    g.nrows()
                )));
            }
            f.transpose() * g / nf
        }
        None => DMatrix::zeros(f.ncols(), 0),
    };
    Ok(VarianceComponents {
        n,
        gamma,
        sigma,
        lambda,
        reduction: Reduction::None,
    })
}

/// Middle matrix of the sandwich for the requested method.
pub fn middle_matrix(method: Method, comps: &VarianceComponents) -> Result<DMatrix<f64>> {
    let lam = &comps.lambda;
    match (method, &comps.reduction) {
        (Method::Naive, _) => Ok(comps.sigma.clone()),
        (Method::Vis | Method::Psi | Method::Pepsi, Reduction::Projector(m)) => {
            if m.nrows() != lam.ncols() || m.ncols() != lam.ncols() {
                return Err(PepsiError::Dimension(format!(
                    "projector is {}x{}, Lambda has {} columns",
                    m.nrows(),
                    m.ncols(),
                    lam.ncols()
                )));
            }
            Ok(&comps.sigma - lam * m * lam.transpose())
        }
        (Method::Avg, Reduction::Mixture(mix)) => {
            let mut out = comps.sigma.clone();
            let t: Vec<DMatrix<f64>> = mix
                .projectors
                .iter()
                .zip(&mix.offsets)
                .map(|(q, &off)| lam.columns(off, q.nrows()) * q)
                .collect();
            for (m, tm) in t.iter().enumerate() {
                let lm = lam.columns(mix.offsets[m], tm.ncols());
                let cross = tm * lm.transpose();
                out -= (&cross + cross.transpose()) * mix.weights[m];
            }
            for (m, tm) in t.iter().enumerate() {
                for (l, tl) in t.iter().enumerate() {
                    let a = mix
                        .second_moment
                        .view((mix.offsets[m], mix.offsets[l]), (tm.ncols(), tl.ncols()));
                    out += tm * a * tl.transpose() * (mix.weights[m] * mix.weights[l]);
                }
            }
            Ok(out)
        }
        (m, _) => Err(PepsiError::InvalidArgument(format!(
            "variance components do not carry the reduction needed for {m}"
        ))),
    }
}

/// `Gamma^-1 middle Gamma^-T / n`, symmetrized and checked for negativity.
pub fn covariance_of(method: Method, comps: &VarianceComponents) -> Result<DMatrix<f64>> {
    let middle = middle_matrix(method, comps)?;
    let g_inv = guarded_inverse(&comps.gamma, "Gamma")?;
    let v = symmetrize(&(&g_inv * middle * g_inv.transpose() / comps.n as f64));
    check_psd(&v)?;
    Ok(v)
}

fn check_psd(v: &DMatrix<f64>) -> Result<()> {
    for j in 0..v.nrows() {
        if v[(j, j)] < 0.0 || !v[(j, j)].is_finite() {
            return Err(PepsiError::NegativeVariance {
                index: j,
                value: v[(j, j)],
            });
        }
    }
    let (vals, vecs) = symmetric_eigen_desc(v);
    if let Some(&min) = vals.last() {
        let scale = vals.first().copied().unwrap_or(0.0).abs().max(1.0);
        if min < -1e-10 * scale {
            let col = vecs.column(vals.len() - 1);
            let index = col.iamax();
            return Err(PepsiError::NegativeVariance { index, value: min });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
    pub re: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceTable {
    pub level: f64,
    pub rows: Vec<InferenceRow>,
}

pub fn wald_inference(
    beta_hat: &DVector<f64>,
    covariance: &DMatrix<f64>,
    level: f64,
    naive_covariance: Option<&DMatrix<f64>>,
    names: &[String],
) -> Result<InferenceTable> {
    let p = beta_hat.len();
    if covariance.shape() != (p, p) {
        return Err(PepsiError::Dimension(format!(
            "covariance is {}x{}, estimate has length {p}",
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(PepsiError::InvalidArgument(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let rows = (0..p)
        .map(|j| {
            let est = beta_hat[j];
            let var = covariance[(j, j)];
            let se = var.max(0.0).sqrt();
            let p_value = if se > 0.0 {
                2.0 * normal.sf((est / se).abs())
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            let re = naive_covariance.map(|nc| nc[(j, j)] / var);
            InferenceRow {
                name: names.get(j).cloned().unwrap_or_else(|| format!("b{j}")),
                estimate: est,
                se,
                lower: est - z * se,
                upper: est + z * se,
                p_value,
                re,
            }
        })
        .collect();
    Ok(InferenceTable { level, rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSizeDiagnostic {
    pub method: Method,
    pub p0: usize,
    pub k_hat: usize,
    pub n: usize,
    pub threshold: usize,
    pub pass: bool,
}

/// Rule of thumb `n >= 40 p0 + c K` with `c = 40` for the projection methods
/// and 20 for the averaging scheme.
pub fn sample_size_check(
    p0: usize,
    k_hat: usize,
    n: usize,
    method: Method,
) -> SampleSizeDiagnostic {
    let per_k = match method {
        Method::Naive => 0,
        Method::Avg => 20,
        Method::Vis | Method::Psi | Method::Pepsi => 40,
    };
    let threshold = 40 * p0 + per_k * k_hat;
    SampleSizeDiagnostic {
        method,
        p0,
        k_hat,
        n,
        threshold,
        pass: n >= threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::Family;
    use approx::assert_relative_eq;

    #[test]
    fn wald_zero_estimate() {
        let t = wald_inference(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            0.95,
            None,
            &[],
        )
        .unwrap();
        let r = &t.rows[0];
        assert_relative_eq!(r.p_value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.lower, -1.959964, epsilon = 1e-6);
        assert_relative_eq!(r.upper, 1.959964, epsilon = 1e-6);
    }

    #[test]
    fn wald_p_value_at_critical_point() {
        let cov = DMatrix::from_element(1, 1, 1.0);
        let t =
            wald_inference(&DVector::from_vec(vec![1.96]), &cov, 0.95, Some(&cov), &[]).unwrap();
        assert!((t.rows[0].p_value - 0.05).abs() < 1e-3);
        assert_eq!(t.rows[0].re, Some(1.0));
    }

    #[test]
    fn sample_size_rule() {
        let d = sample_size_check(5, 5, 600, Method::Pepsi);
        assert_eq!((d.threshold, d.pass), (400, true));
        let d = sample_size_check(5, 5, 300, Method::Pepsi);
        assert_eq!((d.threshold, d.pass), (400, false));
        assert_eq!(sample_size_check(5, 0, 300, Method::Pepsi).threshold, 200);
        assert_eq!(sample_size_check(5, 5, 300, Method::Avg).threshold, 300);
    }

    #[test]
    fn linear_gamma_is_minus_gram() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![0.2, 0.9, 3.4]);
        let data = PrimaryDataset::new(y, x.clone()).unwrap();
        let spec = ModelSpec::new(Family::Linear, 1);
        let c =
            estimate_components(&spec, &data, &DVector::from_vec(vec![0.1, 1.0]), None).unwrap();
        let z = spec.design_matrix(&x).unwrap();
        let expected = -(z.transpose() * &z) / 3.0;
        assert_relative_eq!(c.gamma, expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_projector_matches_naive() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.3, 0.8, 2.5, 2.9]);
        let data = PrimaryDataset::new(y, x).unwrap();
        let spec = ModelSpec::new(Family::Linear, 1);
        let beta = DVector::from_vec(vec![0.2, 0.95]);
        let g = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64 - 1.5);
        let mut c = estimate_components(&spec, &data, &beta, Some(&g)).unwrap();
        let naive = covariance_of(Method::Naive, &c).unwrap();
        c.reduction = Reduction::Projector(DMatrix::zeros(2, 2));
        let pepsi = covariance_of(Method::Pepsi, &c).unwrap();
        assert_eq!(naive, pepsi);
    }

    #[test]
    fn missing_reduction_is_an_error() {
        let data =
            PrimaryDataset::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(2, 0)).unwrap();
        let spec = ModelSpec::new(Family::Linear, 0);
        let c = estimate_components(&spec, &data, &DVector::from_vec(vec![1.5]), None).unwrap();
        assert!(covariance_of(Method::Pepsi, &c).is_err());
    }
}
