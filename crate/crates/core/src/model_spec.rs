//! Estimating-function families for the primary and secondary analyses.
//!
//! Both families emit scores of the form `(y - mu(z'beta)) * z`, where `z` is
//! the design vector (optional leading intercept followed by the covariates)
//! and `mu` is the identity (linear) or the logistic function. Coefficients
//! listed in a spec's fixed-zero set carry the value 0 but their score
//! components are still emitted, which is what makes a constrained function
//! over-identified.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PepsiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Logistic,
}

impl std::str::FromStr for Family {
    type Err = PepsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Family::Linear),
            "logistic" => Ok(Family::Logistic),
            other => Err(PepsiError::Validation(format!(
                "unknown family '{other}' (expected linear or logistic)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        })
    }
}

/// Numerically stable logistic function.
pub fn expit(t: f64) -> f64 {
    if t > 30.0 {
        1.0 / (1.0 + (-t).exp())
    } else if t < -30.0 {
        let e = t.exp();
        e / (1.0 + e)
    } else if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub intercept: bool,
    pub n_covariates: usize,
    fixed_zero: BTreeSet<usize>,
}

impl ModelSpec {
    /// Intercept plus `n_covariates` slopes, no constraints.
    pub fn new(family: Family, n_covariates: usize) -> Self {
        ModelSpec {
            family,
            intercept: true,
            n_covariates,
            fixed_zero: BTreeSet::new(),
        }
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    /// Length of the emitted score vector.
    pub fn dim_g(&self) -> usize {
        self.n_covariates + usize::from(self.intercept)
    }

    /// Number of free coefficients.
    pub fn dim_theta(&self) -> usize {
        self.dim_g() - self.fixed_zero.len()
    }

    pub fn is_over_identified(&self) -> bool {
        self.dim_g() > self.dim_theta()
    }

    pub fn fixed_zero_set(&self) -> &BTreeSet<usize> {
        &self.fixed_zero
    }

    /// Positions (in the full coefficient vector) of the free coefficients.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.dim_g())
            .filter(|j| !self.fixed_zero.contains(j))
            .collect()
    }

    /// Embed free coefficients into a full-length vector with zeros at the
    /// constrained positions.
    pub fn expand(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        if params.len() != self.dim_theta() {
            return Err(PepsiError::Dimension(format!(
                "expected {} free coefficients, got {}",
                self.dim_theta(),
                params.len()
            )));
        }
        let mut full = DVector::zeros(self.dim_g());
        for (k, j) in self.free_indices().into_iter().enumerate() {
            full[j] = params[k];
        }
        Ok(full)
    }

    pub fn design_row(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_covariates {
            return Err(PepsiError::Dimension(format!(
                "row has {} covariates, spec expects {}",
                x.len(),
                self.n_covariates
            )));
        }
        let offset = usize::from(self.intercept);
        let mut z = DVector::zeros(self.dim_g());
        if self.intercept {
            z[0] = 1.0;
        }
        for (k, v) in x.iter().enumerate() {
            z[offset + k] = *v;
        }
        Ok(z)
    }

    /// Full design matrix (n x dim_g).
    pub fn design_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_covariates {
            return Err(PepsiError::Dimension(format!(
                "covariate matrix has {} columns, spec expects {}",
                x.ncols(),
                self.n_covariates
            )));
        }
        let offset = usize::from(self.intercept);
        let mut z = DMatrix::zeros(x.nrows(), self.dim_g());
        if self.intercept {
            z.column_mut(0).fill(1.0);
        }
        for k in 0..self.n_covariates {
            z.column_mut(offset + k).copy_from(&x.column(k));
        }
        Ok(z)
    }

    /// Coefficient labels given covariate names.
    pub fn coefficient_names(&self, covariates: &[String]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim_g());
        if self.intercept {
            names.push("(Intercept)".to_string());
        }
        names.extend(covariates.iter().cloned());
        names
    }
}

/// Constrain the listed coefficient positions to exactly zero.
pub fn apply_zero_constraints(spec: &ModelSpec, zero_set: &[usize]) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for &j in zero_set {
        if j >= spec.dim_g() {
            return Err(PepsiError::InvalidArgument(format!(
                "zero constraint index {j} out of range (spec has {} coefficients)",
                spec.dim_g()
            )));
        }
        out.fixed_zero.insert(j);
    }
    if out.dim_theta() == 0 {
        return Err(PepsiError::InvalidArgument(
            "zero constraints cover every coefficient; no free parameter left".to_string(),
        ));
    }
    Ok(out)
}

/// One observation: outcome plus raw covariates (before the design mapping).
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub y: f64,
    pub x: &'a [f64],
}

/// Score vector `f(D; beta)` for one observation; `params` are the free coefficients.
pub fn eval_score(
    spec: &ModelSpec,
    params: &DVector<f64>,
    row: Observation<'_>,
) -> Result<DVector<f64>> {
    if !row.y.is_finite() || row.x.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "observation has non-finite entries".into(),
        ));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "parameters have non-finite entries".into(),
        ));
    }
    let full = spec.expand(params)?;
    let z = spec.design_row(row.x)?;
    let eta = z.dot(&full);
    let resid = match spec.family {
        Family::Linear => row.y - eta,
        Family::Logistic => row.y - expit(eta),
    };
    Ok(z * resid)
}

/// Averaged Jacobian `n^-1 sum d f / d params` (dim_g x dim_theta).
pub fn eval_jacobian(
    spec: &ModelSpec,
    params: &DVector<f64>,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let design = Design::new(spec, y, x)?;
    let full = spec.expand(params)?;
    if full.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(
            "parameters have non-finite entries".into(),
        ));
    }
    Ok(design.mean_jacobian(&full))
}

/// Pre-computed design for repeated score evaluation over a whole dataset.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub family: Family,
    pub free: Vec<usize>,
    /// `-Z'Z/n`, the constant Jacobian of the linear family.
    linear_jacobian: Option<DMatrix<f64>>,
}

impl Design {
    pub fn new(spec: &ModelSpec, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(PepsiError::Dimension(format!(
                "outcome has {} rows, covariates have {}",
                y.len(),
                x.nrows()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(PepsiError::NonFinite(
                "data contain non-finite values".into(),
            ));
        }
        let z = spec.design_matrix(x)?;
        let linear_jacobian = match spec.family {
            Family::Linear => Some(z.tr_mul(&z) * (-1.0 / z.nrows().max(1) as f64)),
            Family::Logistic => None,
        };
        Ok(Design {
            z,
            y: y.clone(),
            family: spec.family,
            free: spec.free_indices(),
            linear_jacobian,
        })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim_g(&self) -> usize {
        self.z.ncols()
    }

    /// Residuals `y - mu` and curvature weights `d mu / d eta`.
    pub fn residuals(&self, full: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let eta = &self.z * full;
        match self.family {
            Family::Linear => (&self.y - eta, DVector::from_element(self.n(), 1.0)),
            Family::Logistic => {
                let mu = eta.map(expit);
                let v = mu.map(|m| m * (1.0 - m));
                (&self.y - mu, v)
            }
        }
    }

    /// Score matrix (n x dim_g), row i = resid_i * z_i.
    pub fn scores(&self, full: &DVector<f64>) -> DMatrix<f64> {
        let (resid, _) = self.residuals(full);
        self.scores_from_residuals(&resid)
    }

    pub fn scores_from_residuals(&self, resid: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.z.clone();
        for mut col in g.column_iter_mut() {
            col.component_mul_assign(resid);
        }
        g
    }

    /// `-n^-1 sum v_i z_i z_i'` over all coordinates (dim_g x dim_g).
    pub fn mean_jacobian_full(&self, full: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.linear_jacobian {
            return j.clone();
        }
        let (_, v) = self.residuals(full);
        self.weighted_gram(&v) * (-1.0 / self.n() as f64)
    }

    /// Averaged Jacobian restricted to the free columns (dim_g x dim_theta).
    pub fn mean_jacobian(&self, full: &DVector<f64>) -> DMatrix<f64> {
        crate::linalg::select_columns(&self.mean_jacobian_full(full), &self.free)
    }

    /// `sum w_i z_i z_i'`.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut zw = self.z.clone();
        for mut col in zw.column_iter_mut() {
            col.component_mul_assign(w);
        }
        self.z.transpose() * zw
    }
}

#[derive(Debug, Clone)]
pub struct PrimaryDataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl PrimaryDataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|k| format!("X{k}")).collect();
        Self::with_names(y, x, names)
    }

    pub fn with_names(
        y: DVector<f64>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        validate_xy(&y, &x, "primary")?;
        if covariate_names.len() != x.ncols() {
            return Err(PepsiError::Dimension(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        Ok(PrimaryDataset {
            y,
            x,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// The logistic family needs a 0/1 outcome.
    pub fn check_family(&self, family: Family) -> Result<()> {
        if family == Family::Logistic {
            if let Some(i) = self.y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(PepsiError::Validation(format!(
                    "logistic family requires a 0/1 outcome; row {} has value {}",
                    i + 1,
                    self.y[i]
                )));
            }
        }
        Ok(())
    }

    /// Same covariates with a new outcome vector.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        Self::with_names(y, self.x.clone(), self.covariate_names.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SecondaryDataset {
    /// 1-based outcome identifier.
    pub index: usize,
    pub name: String,
    y: DVector<f64>,
    x: DMatrix<f64>,
}

impl SecondaryDataset {
    pub fn new(index: usize, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        Self::with_name(index, format!("S{index}"), y, x)
    }

    pub fn with_name(index: usize, name: String, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        validate_xy(&y, &x, "secondary")?;
        Ok(SecondaryDataset { index, name, y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Secondary rows must be subject-aligned with the primary data.
    pub fn check_aligned(&self, primary: &PrimaryDataset) -> Result<()> {
        if self.n() != primary.n() {
            return Err(PepsiError::Dimension(format!(
                "secondary outcome {} has {} rows, primary has {}",
                self.name,
                self.n(),
                primary.n()
            )));
        }
        Ok(())
    }
}

fn validate_xy(y: &DVector<f64>, x: &DMatrix<f64>, what: &str) -> Result<()> {
    if y.is_empty() {
        return Err(PepsiError::Validation(format!(
            "{what} dataset has no rows"
        )));
    }
    if y.len() != x.nrows() {
        return Err(PepsiError::Dimension(format!(
            "{what} outcome has {} rows, covariates have {}",
            y.len(),
            x.nrows()
        )));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(format!(
            "{what} dataset has missing or non-finite values"
        )));
    }
    Ok(())
}
