//! Primary-analysis estimators: naive, VIS, PSI, averaging and PEPSI.
//!
//! Every method reduces to solving `sum_i p_i f(D_i; beta) = 0` for some
//! weights `p_i` built from the secondary data. Weight construction does not
//! depend on the primary outcome, so it is split out into an [`Integration`]
//! that can be reused across primary outcomes sharing the same covariates.

mod blocks;
pub(crate) mod weighted_ee;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blocks::{
    block_components, pepsi_weights, pool_blocks, pool_secondary, psi_weights, BlockComponents,
    PooledComponents, EIGEN_CUTOFF,
};
pub use weighted_ee::solve_weighted_ee;

use crate::error::{PepsiError, Result};
use crate::linalg::guarded_inverse;
use crate::model_spec::{Design, ModelSpec, PrimaryDataset, SecondaryDataset};
use crate::pel::{bic_select, el_fit, PenaltyConfig, SecondaryFit};
use crate::variance::{covariance_of, estimate_components, Mixture, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Vis,
    Psi,
    Avg,
    Pepsi,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::Vis,
        Method::Psi,
        Method::Avg,
        Method::Pepsi,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Vis => "vis",
            Method::Psi => "psi",
            Method::Avg => "avg",
            Method::Pepsi => "pepsi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = PepsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "vis" => Ok(Method::Vis),
            "psi" => Ok(Method::Psi),
            "avg" | "averaging" => Ok(Method::Avg),
            "pepsi" => Ok(Method::Pepsi),
            other => Err(PepsiError::Validation(format!(
                "unknown method '{other}' (expected naive, vis, psi, avg or pepsi)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightVector {
    pub weights: DVector<f64>,
    pub method: Method,
    pub min_weight: f64,
    pub sum: f64,
    pub n_negative: usize,
}

impl WeightVector {
    pub fn new(weights: DVector<f64>, method: Method) -> Self {
        let min_weight = weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let sum = weights.sum();
        let n_negative = weights.iter().filter(|&&w| w < 0.0).count();
        WeightVector {
            weights,
            method,
            min_weight,
            sum,
            n_negative,
        }
    }

    pub fn uniform(n: usize, method: Method) -> Self {
        Self::new(DVector::from_element(n, 1.0 / n as f64), method)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PrimaryFit {
    pub method: Method,
    pub beta_hat: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub weights_used: WeightVector,
    pub secondary_fits: Vec<SecondaryFit>,
    pub k_hat: usize,
    /// Eigenvalue cutoff lowered `k_hat` below the dimension count.
    pub rank_reduced: bool,
    /// Averaging-scheme mixing weights, one per secondary outcome.
    pub mixing_weights: Option<Vec<f64>>,
    /// Norm of `sum_i p_i f(D_i; beta_hat)`.
    pub score_norm: f64,
    pub warnings: Vec<String>,
}

/// Outcome-independent part of an estimator: the secondary fits and
/// everything derived from them.
#[derive(Debug, Clone)]
pub struct Integration {
    pub method: Method,
    pub n: usize,
    pub secondary_fits: Vec<SecondaryFit>,
    pub k_hat: usize,
    pub rank_reduced: bool,
    pub warnings: Vec<String>,
    kind: Kind,
}

#[derive(Debug, Clone)]
enum Kind {
    Naive,
    Projected {
        weights: WeightVector,
        scores: DMatrix<f64>,
        projector: DMatrix<f64>,
    },
    Averaging {
        block_weights: Vec<WeightVector>,
        blocks: Vec<BlockComponents>,
        scores: DMatrix<f64>,
        offsets: Vec<usize>,
        second_moment: DMatrix<f64>,
    },
}

/// Lightweight estimate returned by [`Integration::estimate`].
#[derive(Debug, Clone)]
pub struct Estimate {
    pub beta_hat: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub weights: WeightVector,
    pub mixing_weights: Option<Vec<f64>>,
    pub score_norm: f64,
    pub warnings: Vec<String>,
}

impl Integration {
    pub fn naive(n: usize) -> Self {
        Integration {
            method: Method::Naive,
            n,
            secondary_fits: Vec::new(),
            k_hat: 0,
            rank_reduced: false,
            warnings: Vec::new(),
            kind: Kind::Naive,
        }
    }

    /// PSI from an existing penalized fit of one secondary outcome.
    pub fn psi_from_fit(
        secondary: &SecondaryDataset,
        fit: SecondaryFit,
        cfg: &PenaltyConfig,
    ) -> Result<Self> {
        Self::single_block(Method::Psi, secondary, fit, cfg)
    }

    /// VIS from an unpenalized fit under user-declared zero constraints.
    pub fn vis_from_fit(
        secondary: &SecondaryDataset,
        fit: SecondaryFit,
        cfg: &PenaltyConfig,
    ) -> Result<Self> {
        if !fit.spec.is_over_identified() {
            return Err(PepsiError::Validation(
                "VIS requires prior-knowledge zero constraints that make the secondary model over-identified".into(),
            ));
        }
        Self::single_block(Method::Vis, secondary, fit, cfg)
    }

    fn single_block(
        method: Method,
        secondary: &SecondaryDataset,
        fit: SecondaryFit,
        cfg: &PenaltyConfig,
    ) -> Result<Self> {
        let block = block_components(secondary, &fit)?;
        let weights = psi_weights(&block, method, &cfg.el)?;
        let mut warnings = Vec::new();
        if block.ridged {
            warnings.push(format!(
                "A for secondary {} was ridge-stabilized",
                fit.outcome
            ));
        }
        let k_hat = if block.vanishing {
            0
        } else {
            block.rank_contribution()
        };
        Ok(Integration {
            method,
            n: secondary.n(),
            k_hat,
            rank_reduced: false,
            warnings,
            secondary_fits: vec![fit],
            kind: Kind::Projected {
                weights,
                projector: block.projector,
                scores: block.scores,
            },
        })
    }

    /// PEPSI from penalized fits of every secondary outcome.
    pub fn pepsi_from_fits(
        secondaries: &[SecondaryDataset],
        fits: Vec<SecondaryFit>,
    ) -> Result<Self> {
        let pooled = pool_secondary(&fits, secondaries)?;
        Ok(Self::pepsi_from_pooled(pooled, fits))
    }

    pub fn pepsi_from_pooled(pooled: PooledComponents, fits: Vec<SecondaryFit>) -> Self {
        let weights = pepsi_weights(&pooled);
        let mut warnings = Vec::new();
        if pooled.rank_reduced {
            warnings.push(format!(
                "K reduced from {} to {} by the eigenvalue cutoff",
                pooled.k_formula, pooled.k_hat
            ));
        }
        if pooled.k_hat == 0 {
            warnings.push(
                "no informative secondary outcome; PEPSI reduces to the naive estimator".into(),
            );
        }
        if weights.n_negative > 0 {
            warnings.push(format!(
                "{} negative PEPSI weights (min {:.3e})",
                weights.n_negative, weights.min_weight
            ));
        }
        for b in pooled.blocks.iter().filter(|b| b.ridged) {
            warnings.push(format!(
                "A for secondary {} was ridge-stabilized",
                b.outcome
            ));
        }
        Integration {
            method: Method::Pepsi,
            n: pooled.n(),
            k_hat: pooled.k_hat,
            rank_reduced: pooled.rank_reduced,
            warnings,
            secondary_fits: fits,
            kind: Kind::Projected {
                weights,
                projector: pooled.projector,
                scores: pooled.g_matrix,
            },
        }
    }

    /// Averaging scheme from penalized fits of every secondary outcome.
    pub fn averaging_from_fits(
        secondaries: &[SecondaryDataset],
        fits: Vec<SecondaryFit>,
        cfg: &PenaltyConfig,
    ) -> Result<Self> {
        let pooled = pool_secondary(&fits, secondaries)?;
        let block_weights = pooled
            .blocks
            .iter()
            .map(|b| psi_weights(b, Method::Psi, &cfg.el))
            .collect::<Result<Vec<_>>>()?;
        let n = pooled.n();
        let second_moment =
            crate::linalg::symmetrize(&(pooled.g_matrix.transpose() * &pooled.g_matrix / n as f64));
        Ok(Integration {
            method: Method::Avg,
            n,
            k_hat: pooled.k_formula,
            rank_reduced: false,
            warnings: Vec::new(),
            secondary_fits: fits,
            kind: Kind::Averaging {
                block_weights,
                blocks: pooled.blocks,
                scores: pooled.g_matrix,
                offsets: pooled.offsets,
                second_moment,
            },
        })
    }

    /// Weights applied to the primary estimating equation. For the averaging
    /// scheme these depend on the primary data and are not available here.
    pub fn fixed_weights(&self) -> Option<WeightVector> {
        match &self.kind {
            Kind::Naive => Some(WeightVector::uniform(self.n, Method::Naive)),
            Kind::Projected { weights, .. } => Some(weights.clone()),
            Kind::Averaging { .. } => None,
        }
    }

    /// Solve the primary equation and attach the plug-in covariance.
    pub fn estimate(&self, spec: &ModelSpec, primary: &PrimaryDataset) -> Result<Estimate> {
        if primary.n() != self.n {
            return Err(PepsiError::Dimension(format!(
                "primary data has {} rows, secondary data {}",
                primary.n(),
                self.n
            )));
        }
        primary.check_family(spec.family)?;
        let design = Design::new(spec, primary.y(), primary.x())?;
        match &self.kind {
            Kind::Naive => {
                let w = WeightVector::uniform(self.n, Method::Naive);
                let beta = weighted_ee::solve_design_root(&design, &w.weights, None)?;
                let comps = estimate_components(spec, primary, &beta, None)?;
                let cov = covariance_of(Method::Naive, &comps)?;
                finish(&design, spec, beta, cov, w, None, self.warnings.clone())
            }
            Kind::Projected {
                weights,
                scores,
                projector,
            } => {
                let beta = weighted_ee::solve_design_root(&design, &weights.weights, None)?;
                let mut comps = estimate_components(spec, primary, &beta, Some(scores))?;
                comps.reduction = Reduction::Projector(projector.clone());
                let cov = covariance_of(self.method, &comps)?;
                finish(
                    &design,
                    spec,
                    beta,
                    cov,
                    weights.clone(),
                    None,
                    self.warnings.clone(),
                )
            }
            Kind::Averaging {
                block_weights,
                blocks,
                scores,
                offsets,
                second_moment,
            } => {
                let mut warnings = self.warnings.clone();
                let uniform = DVector::from_element(self.n, 1.0 / self.n as f64);
                let pilot = weighted_ee::solve_design_root(&design, &uniform, None)?;
                let pilot_comps = estimate_components(spec, primary, &pilot, Some(scores))?;
                let projectors: Vec<DMatrix<f64>> =
                    blocks.iter().map(|b| b.projector.clone()).collect();
                let informative: Vec<bool> = blocks.iter().map(|b| !b.vanishing).collect();
                let (mix, fallback) = averaging_weights(
                    &pilot_comps.gamma,
                    &pilot_comps.sigma,
                    &pilot_comps.lambda,
                    offsets,
                    &projectors,
                    second_moment,
                    &informative,
                )?;
                if fallback {
                    warnings
                        .push("averaging weight problem is singular; using equal weights".into());
                }
                let mut combined = DVector::zeros(self.n);
                for (wm, bw) in mix.iter().zip(block_weights) {
                    combined += &bw.weights * *wm;
                }
                let weights = WeightVector::new(combined, Method::Avg);
                let beta = weighted_ee::solve_design_root(&design, &weights.weights, Some(&pilot))?;
                let mut comps = estimate_components(spec, primary, &beta, Some(scores))?;
                comps.reduction = Reduction::Mixture(Mixture {
                    weights: mix.clone(),
                    offsets: offsets.clone(),
                    projectors,
                    second_moment: second_moment.clone(),
                });
                let cov = covariance_of(Method::Avg, &comps)?;
                finish(&design, spec, beta, cov, weights, Some(mix), warnings)
            }
        }
    }

    pub fn fit(&self, spec: &ModelSpec, primary: &PrimaryDataset) -> Result<PrimaryFit> {
        let est = self.estimate(spec, primary)?;
        Ok(PrimaryFit {
            method: self.method,
            beta_hat: est.beta_hat,
            covariance: est.covariance,
            weights_used: est.weights,
            secondary_fits: self.secondary_fits.clone(),
            k_hat: self.k_hat,
            rank_reduced: self.rank_reduced,
            mixing_weights: est.mixing_weights,
            score_norm: est.score_norm,
            warnings: est.warnings,
        })
    }
}

fn finish(
    design: &Design,
    spec: &ModelSpec,
    beta: DVector<f64>,
    covariance: DMatrix<f64>,
    weights: WeightVector,
    mixing_weights: Option<Vec<f64>>,
    warnings: Vec<String>,
) -> Result<Estimate> {
    let full = spec.expand(&beta)?;
    let (resid, _) = design.residuals(&full);
    let zs = design.z.transpose() * resid.component_mul(&weights.weights);
    let score_norm = design
        .free
        .iter()
        .map(|&j| zs[j] * zs[j])
        .sum::<f64>()
        .sqrt();
    Ok(Estimate {
        beta_hat: beta,
        covariance,
        weights,
        mixing_weights,
        score_norm,
        warnings,
    })
}

/// Mixing weights for the averaging scheme.
///
/// Minimises `sum_j V(w)_jj / V_naive,jj` subject to `sum w = 1`, where
/// `V(w)` is the variance of the influence `f - sum_m w_m Lambda_m Q_m g_m`.
/// Only informative blocks are optimised; uninformative blocks share the
/// remaining mass equally (their weights are uniform so this is immaterial to
/// the estimate). Returns `(w, fell_back_to_equal)`.
pub fn averaging_weights(
    gamma: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    offsets: &[usize],
    projectors: &[DMatrix<f64>],
    second_moment: &DMatrix<f64>,
    informative: &[bool],
) -> Result<(Vec<f64>, bool)> {
    let m_count = projectors.len();
    let equal = vec![1.0 / m_count as f64; m_count];
    let inf: Vec<usize> = (0..m_count).filter(|&m| informative[m]).collect();
    if inf.is_empty() {
        return Ok((equal, false));
    }
    let g_inv = guarded_inverse(gamma, "Gamma")?;
    let v_naive = &g_inv * sigma * g_inv.transpose();
    let d: Vec<f64> = (0..v_naive.nrows())
        .map(|j| 1.0 / v_naive[(j, j)])
        .collect();
    let p0 = gamma.nrows();

    let mut u = Vec::with_capacity(inf.len());
    let mut l = Vec::with_capacity(inf.len());
    for &m in &inf {
        let r = projectors[m].nrows();
        let lam = lambda.columns(offsets[m], r).into_owned();
        u.push(&g_inv * &lam * &projectors[m]);
        l.push(&g_inv * lam);
    }
    let k = inf.len();
    let weighted_trace = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> f64 {
        // sum_j d_j (x y')_jj
        (0..p0).map(|j| d[j] * x.row(j).dot(&y.row(j))).sum()
    };
    let b = DVector::from_fn(k, |i, _| weighted_trace(&u[i], &l[i]));
    let mut q = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let (mi, mj) = (inf[i], inf[j]);
            let a_ij = second_moment.view(
                (offsets[mi], offsets[mj]),
                (projectors[mi].nrows(), projectors[mj].nrows()),
            );
            let ua = &u[i] * a_ij;
            let v = weighted_trace(&ua, &u[j]);
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }

    let mut w = vec![0.0; m_count];
    if k < m_count {
        let Ok(q_inv) = guarded_inverse(&q, "averaging quadratic form") else {
            return Ok((equal, true));
        };
        let wi = q_inv * &b;
        let rest = (1.0 - wi.sum()) / (m_count - k) as f64;
        w.fill(rest);
        for (i, &m) in inf.iter().enumerate() {
            w[m] = wi[i];
        }
    } else {
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&(&q * 2.0));
        for i in 0..k {
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(k + 1);
        rhs.rows_mut(0, k).copy_from(&(&b * 2.0));
        rhs[k] = 1.0;
        let Ok(kkt_inv) = guarded_inverse(&kkt, "averaging KKT system") else {
            return Ok((equal, true));
        };
        let sol = kkt_inv * rhs;
        for i in 0..k {
            w[inf[i]] = sol[i];
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Ok((equal, true));
    }
    Ok((w, false))
}

/// Fit every secondary outcome by BIC-tuned penalized EL (in parallel).
pub fn fit_secondaries(
    secondaries: &[SecondaryDataset],
    specs: &[ModelSpec],
    cfg: &PenaltyConfig,
) -> Result<Vec<SecondaryFit>> {
    if secondaries.len() != specs.len() {
        return Err(PepsiError::Dimension(format!(
            "{} secondary datasets but {} specs",
            secondaries.len(),
            specs.len()
        )));
    }
    secondaries
        .par_iter()
        .zip(specs.par_iter())
        .map(|(s, spec)| bic_select(s, spec, cfg))
        .collect()
}

fn check_aligned(primary: &PrimaryDataset, secondaries: &[SecondaryDataset]) -> Result<()> {
    for s in secondaries {
        s.check_aligned(primary)?;
    }
    Ok(())
}

pub fn naive_fit(primary: &PrimaryDataset, spec: &ModelSpec) -> Result<PrimaryFit> {
    Integration::naive(primary.n()).fit(spec, primary)
}

pub fn psi_fit(
    primary: &PrimaryDataset,
    secondary: &SecondaryDataset,
    spec_primary: &ModelSpec,
    spec_secondary: &ModelSpec,
    cfg: &PenaltyConfig,
) -> Result<PrimaryFit> {
    secondary.check_aligned(primary)?;
    let fit = bic_select(secondary, spec_secondary, cfg)?;
    Integration::psi_from_fit(secondary, fit, cfg)?.fit(spec_primary, primary)
}

pub fn vis_fit(
    primary: &PrimaryDataset,
    secondary: &SecondaryDataset,
    spec_primary: &ModelSpec,
    spec_secondary: &ModelSpec,
    cfg: &PenaltyConfig,
) -> Result<PrimaryFit> {
    secondary.check_aligned(primary)?;
    if !spec_secondary.is_over_identified() {
        return Err(PepsiError::Validation(
            "VIS requires prior-knowledge zero constraints that make the secondary model over-identified".into(),
        ));
    }
    let fit = el_fit(secondary, spec_secondary, cfg)?;
    Integration::vis_from_fit(secondary, fit, cfg)?.fit(spec_primary, primary)
}

pub fn pepsi_fit(
    primary: &PrimaryDataset,
    secondaries: &[SecondaryDataset],
    spec_primary: &ModelSpec,
    specs: &[ModelSpec],
    cfg: &PenaltyConfig,
) -> Result<PrimaryFit> {
    if secondaries.is_empty() {
        return Err(PepsiError::InvalidArgument(
            "PEPSI needs at least one secondary outcome".into(),
        ));
    }
    check_aligned(primary, secondaries)?;
    let fits = fit_secondaries(secondaries, specs, cfg)?;
    Integration::pepsi_from_fits(secondaries, fits)?.fit(spec_primary, primary)
}

pub fn averaging_fit(
    primary: &PrimaryDataset,
    secondaries: &[SecondaryDataset],
    spec_primary: &ModelSpec,
    specs: &[ModelSpec],
    cfg: &PenaltyConfig,
) -> Result<PrimaryFit> {
    if secondaries.is_empty() {
        return Err(PepsiError::InvalidArgument(
            "averaging needs at least one secondary outcome".into(),
        ));
    }
    check_aligned(primary, secondaries)?;
    let fits = fit_secondaries(secondaries, specs, cfg)?;
    Integration::averaging_from_fits(secondaries, fits, cfg)?.fit(spec_primary, primary)
}
