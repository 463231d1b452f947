//! Data-generating processes for the two simulation designs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PepsiError, Result};
use crate::model_spec::{PrimaryDataset, SecondaryDataset};

pub const N_COVARIATES: usize = 4;
pub const AR1_PHI: f64 = 0.5;
pub const CASE2_OUTCOMES: usize = 50;

const CASE2_PATTERNS: [[f64; 4]; 5] = [
    [1.0, 1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [1.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, 1.0, 1.0],
];

/// Lower Cholesky factor of the AR(1) correlation matrix.
pub fn ar1_cholesky(p: usize, phi: f64) -> DMatrix<f64> {
    let corr = DMatrix::from_fn(p, p, |i, j| phi.powi((i as i32 - j as i32).abs()));
    corr.cholesky()
        .expect("AR(1) correlation is positive definite")
        .l()
}

/// Primary slopes `(1, beta2, 1, 1)` with intercept 1.
pub fn primary_coefficients(beta2: f64) -> DVector<f64> {
    DVector::from_vec(vec![1.0, 1.0, beta2, 1.0, 1.0])
}

/// Secondary coefficient rows: outcomes 1-10 cycle through sparse patterns,
/// 11-50 are all ones.
pub fn case2_theta() -> Vec<[f64; 4]> {
    (0..CASE2_OUTCOMES)
        .map(|m| {
            if m < 10 {
                CASE2_PATTERNS[m % 5]
            } else {
                [1.0; 4]
            }
        })
        .collect()
}

/// Joint residual correlation: primary first, then the 50 secondaries.
pub fn case2_correlation() -> DMatrix<f64> {
    let d = CASE2_OUTCOMES + 1;
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if i == 0 || j == 0 {
            let m = i.max(j);
            if m <= 2 {
                0.8
            } else {
                0.5
            }
        } else {
            0.5
        }
    })
}

/// One draw of covariates and residual noise. The primary outcome is formed
/// on demand so different `beta2` values share the same draw.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub x: DMatrix<f64>,
    /// Primary residual.
    pub eps: DVector<f64>,
    pub secondaries: Vec<SecondaryDataset>,
}

impl SimDraw {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn primary(&self, beta2: f64) -> PrimaryDataset {
        let b = primary_coefficients(beta2);
        let y = DVector::from_fn(self.n(), |i, _| {
            b[0] + (0..N_COVARIATES)
                .map(|k| b[k + 1] * self.x[(i, k)])
                .sum::<f64>()
                + self.eps[i]
        });
        PrimaryDataset::new(y, self.x.clone()).expect("simulated data are finite")
    }

    pub fn secondary(&self, index: usize) -> Option<&SecondaryDataset> {
        self.secondaries.iter().find(|s| s.index == index)
    }
}

fn draw_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let l = ar1_cholesky(N_COVARIATES, AR1_PHI);
    let mut x = DMatrix::zeros(n, N_COVARIATES);
    let mut z = DVector::zeros(N_COVARIATES);
    for i in 0..n {
        for k in 0..N_COVARIATES {
            z[k] = rng.sample(StandardNormal);
        }
        let row = &l * &z;
        for k in 0..N_COVARIATES {
            x[(i, k)] = row[k];
        }
    }
    x
}

fn check_n(n: usize) -> Result<()> {
    if n < N_COVARIATES + 3 {
        return Err(PepsiError::InvalidArgument(format!(
            "n must be at least {} for these designs, got {n}",
            N_COVARIATES + 3
        )));
    }
    Ok(())
}

/// Case 1: one secondary outcome `X1 + X2 + e2` with `corr(e1, e2) = rho`.
/// With `misspecify` the secondary dataset omits `X1`.
pub fn gen_case1<R: Rng + ?Sized>(
    n: usize,
    rho: f64,
    misspecify: bool,
    rng: &mut R,
) -> Result<SimDraw> {
    check_n(n)?;
    if !(rho > -1.0 && rho < 1.0) {
        return Err(PepsiError::InvalidArgument(format!(
            "rho must lie in (-1, 1), got {rho}"
        )));
    }
    let x = draw_covariates(n, rng);
    let mut eps = DVector::zeros(n);
    let mut ys = DVector::zeros(n);
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        eps[i] = e1;
        ys[i] = x[(i, 0)] + x[(i, 1)] + rho * e1 + s * z;
    }
    let xs = if misspecify {
        x.columns(1, N_COVARIATES - 1).into_owned()
    } else {
        x.clone()
    };
    let secondary = SecondaryDataset::new(1, ys, xs)?;
    Ok(SimDraw {
        x,
        eps,
        secondaries: vec![secondary],
    })
}

/// Case 2 generator; the joint residual factorization is computed once.
#[derive(Debug, Clone)]
pub struct Case2Generator {
    chol: DMatrix<f64>,
    theta: Vec<[f64; 4]>,
}

impl Case2Generator {
    pub fn new() -> Result<Self> {
        let corr = case2_correlation();
        let chol = corr.cholesky().ok_or_else(|| {
            PepsiError::Validation(
                "Case 2 residual correlation matrix is not positive definite".into(),
            )
        })?;
        Ok(Case2Generator {
            chol: chol.l(),
            theta: case2_theta(),
        })
    }

    /// Draw covariates and residuals; only the listed secondary outcomes
    /// (1-based) are materialised, but all 50 residuals are always drawn so
    /// the data do not depend on the selection.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        outcomes: &[usize],
        rng: &mut R,
    ) -> Result<SimDraw> {
        check_n(n)?;
        if let Some(&bad) = outcomes.iter().find(|&&m| m == 0 || m > CASE2_OUTCOMES) {
            return Err(PepsiError::InvalidArgument(format!(
                "secondary outcome {bad} out of range 1..={CASE2_OUTCOMES}"
            )));
        }
        let x = draw_covariates(n, rng);
        let d = CASE2_OUTCOMES + 1;
        let mut e = DMatrix::zeros(n, d);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for k in 0..d {
                z[k] = rng.sample(StandardNormal);
            }
            let row = &self.chol * &z;
            for k in 0..d {
                e[(i, k)] = row[k];
            }
        }
        let eps = e.column(0).into_owned();
        let secondaries = outcomes
            .iter()
            .map(|&m| {
                let th = self.theta[m - 1];
                let y = DVector::from_fn(n, |i, _| {
                    (0..N_COVARIATES).map(|k| th[k] * x[(i, k)]).sum::<f64>() + e[(i, m)]
                });
                SecondaryDataset::new(m, y, x.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SimDraw {
            x,
            eps,
            secondaries,
        })
    }
}

/// All 50 secondary outcomes of Case 2.
pub fn gen_case2<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SimDraw> {
    let all: Vec<usize> = (1..=CASE2_OUTCOMES).collect();
    Case2Generator::new()?.generate(n, &all, rng)
}

/// 0-based positions of the true zeros in a secondary working model without
/// intercept (Case 1 misspecified drops `X1`).
pub fn true_zero_positions(case2: bool, outcome: usize, misspecify: bool) -> Vec<usize> {
    if case2 {
        let th = case2_theta()[outcome - 1];
        (0..N_COVARIATES).filter(|&k| th[k] == 0.0).collect()
    } else if misspecify {
        vec![1, 2]
    } else {
        vec![2, 3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::rng_stream;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn case2_correlation_is_positive_definite() {
        let (vals, _) = crate::linalg::symmetric_eigen_desc(&case2_correlation());
        assert!(*vals.last().unwrap() > 0.05);
    }

    #[test]
    fn theta_layout() {
        let th = case2_theta();
        assert_eq!(th.len(), 50);
        assert_eq!(th[0], [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(th[5], th[0]);
        assert_eq!(th[9], [0.0, 0.0, 1.0, 1.0]);
        assert!(th[10..].iter().all(|r| *r == [1.0; 4]));
        assert_eq!(true_zero_positions(true, 3, false), vec![0, 2]);
    }

    #[test]
    fn case1_large_sample_moments() {
        let mut rng = rng_stream(7, 0);
        let d = gen_case1(100_000, 0.8, false, &mut rng).unwrap();
        let x = &d.x;
        let c13 = corr(x.column(0).as_slice(), x.column(2).as_slice());
        assert!((c13 - 0.25).abs() < 0.01, "{c13}");
        let s = &d.secondaries[0];
        let e2: Vec<f64> = (0..d.n())
            .map(|i| s.y()[i] - x[(i, 0)] - x[(i, 1)])
            .collect();
        let c = corr(d.eps.as_slice(), &e2);
        assert!((c - 0.8).abs() < 0.01, "{c}");
    }

    #[test]
    fn case2_residual_correlation() {
        let mut rng = rng_stream(8, 0);
        let d = Case2Generator::new()
            .unwrap()
            .generate(100_000, &[1, 3], &mut rng)
            .unwrap();
        let s = d.secondary(1).unwrap();
        let e1: Vec<f64> = (0..d.n())
            .map(|i| s.y()[i] - d.x[(i, 0)] - d.x[(i, 1)])
            .collect();
        assert!((corr(d.eps.as_slice(), &e1) - 0.8).abs() < 0.01);
        let s3 = d.secondary(3).unwrap();
        let e3: Vec<f64> = (0..d.n())
            .map(|i| s3.y()[i] - d.x[(i, 1)] - d.x[(i, 3)])
            .collect();
        assert!((corr(d.eps.as_slice(), &e3) - 0.5).abs() < 0.01);
    }

    #[test]
    fn primary_rebuild_with_other_beta2() {
        let mut rng = rng_stream(9, 0);
        let d = gen_case1(50, 0.5, false, &mut rng).unwrap();
        let a = d.primary(1.0);
        let b = d.primary(0.0);
        for i in 0..50 {
            assert!((a.y()[i] - b.y()[i] - d.x[(i, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn misspecified_drops_first_covariate() {
        let mut rng = rng_stream(1, 1);
        let d = gen_case1(20, 0.8, true, &mut rng).unwrap();
        assert_eq!(d.secondaries[0].x().ncols(), 3);
        assert_eq!(d.secondaries[0].x().column(0), d.x.column(1));
    }
}
