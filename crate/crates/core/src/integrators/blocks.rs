//! Per-secondary asymptotic blocks and their pooled PCA form.

use nalgebra::{DMatrix, DVector};

use crate::el::{el_weights, solve_dual, ElOptions};
use crate::error::{PepsiError, Result};
use crate::linalg::{guarded_inverse, spd_inverse_ridged, symmetric_eigen_desc, symmetrize};
use crate::model_spec::{Design, SecondaryDataset};
use crate::pel::{zero_pattern, SecondaryFit};

use super::{Method, WeightVector};

/// Relative cutoff below which eigenvalues of the pooled second moment are dropped.
pub const EIGEN_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BlockComponents {
    pub outcome: usize,
    /// Scores at the fitted secondary coefficients (n x r).
    pub scores: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `S + P`.
    pub projector: DMatrix<f64>,
    /// `A (S + P)`.
    pub r_mat: DMatrix<f64>,
    /// `A` needed a ridge to invert.
    pub ridged: bool,
    /// Just-identified with no zeros: `S = P = 0` exactly.
    pub vanishing: bool,
    /// Number of free coefficients and detected zeros.
    pub p_free: usize,
    pub q_hat: usize,
}

impl BlockComponents {
    pub fn r(&self) -> usize {
        self.scores.ncols()
    }

    /// Contribution `r - (p - q)` to the pooled rank.
    pub fn rank_contribution(&self) -> usize {
        self.r() - (self.p_free - self.q_hat)
    }
}

pub fn block_components(
    secondary: &SecondaryDataset,
    fit: &SecondaryFit,
) -> Result<BlockComponents> {
    let design = Design::new(&fit.spec, secondary.y(), secondary.x())?;
    let full = fit.theta_full();
    let scores = design.scores(&full);
    let n = design.n() as f64;
    let r = scores.ncols();
    let a = symmetrize(&(scores.transpose() * &scores / n));
    let (a_inv, ridged) = spd_inverse_ridged(&a, &format!("A (secondary {})", fit.outcome))?;
    let b = design.mean_jacobian(&full);
    let h = zero_pattern(fit);
    let e = &a_inv * &b;
    let c = guarded_inverse(
        &symmetrize(&(b.transpose() * &e)),
        &format!("C (secondary {})", fit.outcome),
    )?;

    let vanishing = fit.is_uninformative();
    let (s, p) = if vanishing {
        (DMatrix::zeros(r, r), DMatrix::zeros(r, r))
    } else {
        let ece = &e * &c * e.transpose();
        let s = symmetrize(&(&a_inv - &ece));
        let p = if h.nrows() == 0 {
            DMatrix::zeros(r, r)
        } else {
            let hc = &h * &c;
            let hch = guarded_inverse(
                &symmetrize(&(&hc * h.transpose())),
                &format!("HCH' (secondary {})", fit.outcome),
            )?;
            let left = &e * hc.transpose();
            symmetrize(&(&left * hch * left.transpose()))
        };
        (s, p)
    };
    let projector = &s + &p;
    let r_mat = &a * &projector;
    Ok(BlockComponents {
        outcome: fit.outcome,
        scores,
        a,
        a_inv,
        b,
        c,
        s,
        p,
        h,
        projector,
        r_mat,
        ridged,
        vanishing,
        p_free: fit.theta_hat.len(),
        q_hat: fit.q_hat,
    })
}

/// Exact EL weights at the fitted coefficients (re-solved from zero), or
/// uniform weights when the block carries no information.
pub fn psi_weights(
    block: &BlockComponents,
    method: Method,
    opts: &ElOptions,
) -> Result<WeightVector> {
    let n = block.scores.nrows();
    if block.vanishing {
        return Ok(WeightVector::uniform(n, method));
    }
    let dual = solve_dual(&block.scores, opts)?;
    Ok(WeightVector::new(
        el_weights(&dual.lambda, &block.scores),
        method,
    ))
}

#[derive(Debug, Clone)]
pub struct PooledComponents {
    /// Stacked scores (n x R).
    pub g_matrix: DMatrix<f64>,
    /// Column offset of each block in `g_matrix`.
    pub offsets: Vec<usize>,
    pub blocks: Vec<BlockComponents>,
    /// Block-diagonal `diag(R_1, ..., R_M)`.
    pub r_hat: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub eigvals: Vec<f64>,
    /// Matching eigenvectors (R x K).
    pub eigvecs: DMatrix<f64>,
    pub k_hat: usize,
    /// Rank implied by the block dimensions.
    pub k_formula: usize,
    /// Some eigenvalues fell below the cutoff and `k_hat < k_formula`.
    pub rank_reduced: bool,
    /// `R' U Phi^-1 U' R` (R x R).
    pub projector: DMatrix<f64>,
}

impl PooledComponents {
    pub fn n(&self) -> usize {
        self.g_matrix.nrows()
    }

    pub fn total_dim(&self) -> usize {
        self.g_matrix.ncols()
    }
}

pub fn pool_secondary(
    fits: &[SecondaryFit],
    secondaries: &[SecondaryDataset],
) -> Result<PooledComponents> {
    if fits.is_empty() {
        return Err(PepsiError::InvalidArgument(
            "at least one secondary fit is required".into(),
        ));
    }
    if fits.len() != secondaries.len() {
        return Err(PepsiError::Dimension(format!(
            "{} fits for {} secondary datasets",
            fits.len(),
            secondaries.len()
        )));
    }
    let n = secondaries[0].n();
    if secondaries.iter().any(|s| s.n() != n) {
        return Err(PepsiError::Dimension(
            "secondary datasets have different row counts".into(),
        ));
    }
    let blocks = fits
        .iter()
        .zip(secondaries)
        .map(|(f, s)| block_components(s, f))
        .collect::<Result<Vec<_>>>()?;
    pool_blocks(blocks)
}

pub fn pool_blocks(blocks: Vec<BlockComponents>) -> Result<PooledComponents> {
    if blocks.is_empty() {
        return Err(PepsiError::InvalidArgument(
            "at least one block is required".into(),
        ));
    }
    let n = blocks[0].scores.nrows();
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut total = 0;
    for b in &blocks {
        if b.scores.nrows() != n {
            return Err(PepsiError::Dimension(
                "blocks have different row counts".into(),
            ));
        }
        offsets.push(total);
        total += b.r();
    }
    let mut g = DMatrix::zeros(n, total);
    let mut r_hat = DMatrix::zeros(total, total);
    for (b, &off) in blocks.iter().zip(&offsets) {
        g.view_mut((0, off), (n, b.r())).copy_from(&b.scores);
        r_hat
            .view_mut((off, off), (b.r(), b.r()))
            .copy_from(&b.r_mat);
    }
    let k_formula: usize = blocks.iter().map(|b| b.rank_contribution()).sum();

    // Only blocks with a non-zero R enter the eigen-problem.
    let active: Vec<usize> = (0..total)
        .filter(|&col| {
            let m = offsets.iter().rposition(|&o| o <= col).unwrap();
            !blocks[m].vanishing
        })
        .collect();
    let mut projector = DMatrix::zeros(total, total);
    let mut eigvecs = DMatrix::zeros(total, 0);
    let mut eigvals = Vec::new();
    if !active.is_empty() && k_formula > 0 {
        let ra = DMatrix::from_fn(active.len(), active.len(), |i, j| {
            r_hat[(active[i], active[j])]
        });
        let ga = DMatrix::from_fn(n, active.len(), |i, j| g[(i, active[j])]);
        let rg = &ga * ra.transpose();
        let w = symmetrize(&(rg.transpose() * &rg / n as f64));
        let (vals, vecs) = symmetric_eigen_desc(&w);
        let lmax = vals.first().copied().unwrap_or(0.0);
        if lmax > 0.0 {
            let keep = vals
                .iter()
                .take(k_formula)
                .take_while(|&&v| v > EIGEN_CUTOFF * lmax)
                .count();
            eigvals = vals[..keep].to_vec();
            let u = vecs.columns(0, keep).into_owned();
            let phi_inv = DMatrix::from_diagonal(&DVector::from_iterator(
                keep,
                eigvals.iter().map(|v| 1.0 / v),
            ));
            let ur = u.transpose() * &ra;
            let m_act = symmetrize(&(ur.transpose() * phi_inv * &ur));
            for (i, &ai) in active.iter().enumerate() {
                for (j, &aj) in active.iter().enumerate() {
                    projector[(ai, aj)] = m_act[(i, j)];
                }
            }
            eigvecs = DMatrix::zeros(total, keep);
            for (i, &ai) in active.iter().enumerate() {
                for k in 0..keep {
                    eigvecs[(ai, k)] = u[(i, k)];
                }
            }
        }
    }
    let k_hat = eigvals.len();
    let rank_reduced = k_hat < k_formula;
    if rank_reduced {
        log::warn!(
            "pooled second moment has rank {k_hat} < {k_formula}; dropping near-zero eigenvalues"
        );
    }
    Ok(PooledComponents {
        g_matrix: g,
        offsets,
        blocks,
        r_hat,
        eigvals,
        eigvecs,
        k_hat,
        k_formula,
        rank_reduced,
        projector,
    })
}

/// `p_i = n^-1 (1 - G_i' M gbar)`; negative entries are kept.
pub fn pepsi_weights(pooled: &PooledComponents) -> WeightVector {
    let n = pooled.n();
    if pooled.k_hat == 0 {
        log::warn!("no informative secondary direction; PEPSI weights are uniform");
        return WeightVector::uniform(n, Method::Pepsi);
    }
    let nf = n as f64;
    let gbar = pooled.g_matrix.row_sum().transpose() / nf;
    let t = &pooled.projector * gbar;
    let gt = &pooled.g_matrix * t;
    WeightVector::new(gt.map(|v| (1.0 - v) / nf), Method::Pepsi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{Family, ModelSpec};
    use crate::pel::{bic_select, PenaltyConfig};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_secondary(seed: u64, n: usize, zero_tail: bool) -> SecondaryDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)]
                + if zero_tail {
                    0.0
                } else {
                    0.7 * x[(i, 1)] + 0.4 * x[(i, 2)]
                }
                + e
        });
        SecondaryDataset::new(1, y, x).unwrap()
    }

    #[test]
    fn projection_identity_and_pooled_single_block() {
        let sec = toy_secondary(11, 300, true);
        let spec = ModelSpec::new(Family::Linear, 3).without_intercept();
        let fit = bic_select(&sec, &spec, &PenaltyConfig::default()).unwrap();
        assert!(fit.q_hat > 0);
        let blk = block_components(&sec, &fit).unwrap();
        let q = &blk.projector;
        let lhs = q * &blk.a * q;
        assert!((lhs - q).abs().max() < 1e-8);
        let pooled = pool_blocks(vec![blk.clone()]).unwrap();
        assert_eq!(pooled.k_hat, fit.q_hat);
        assert!((&pooled.projector - q).abs().max() < 1e-6 * q.abs().max().max(1.0));
    }

    #[test]
    fn just_identified_block_vanishes() {
        let sec = toy_secondary(12, 200, false);
        let spec = ModelSpec::new(Family::Linear, 3).without_intercept();
        let fit = bic_select(&sec, &spec, &PenaltyConfig::default()).unwrap();
        assert_eq!(fit.q_hat, 0);
        let blk = block_components(&sec, &fit).unwrap();
        assert!(blk.vanishing);
        assert_eq!(blk.r_mat.abs().max(), 0.0);
        let pooled = pool_blocks(vec![blk]).unwrap();
        assert_eq!(pooled.k_hat, 0);
        let w = pepsi_weights(&pooled);
        assert!(w.weights.iter().all(|&v| v == 1.0 / 200.0));
    }

    #[test]
    fn weight_sum_identity() {
        let sec = toy_secondary(13, 250, true);
        let spec = ModelSpec::new(Family::Linear, 3).without_intercept();
        let fit = bic_select(&sec, &spec, &PenaltyConfig::default()).unwrap();
        let pooled = pool_secondary(&[fit], &[sec]).unwrap();
        let w = pepsi_weights(&pooled);
        let n = pooled.n() as f64;
        let sg = pooled.g_matrix.row_sum().transpose();
        let expected = 1.0 - (sg.transpose() * &pooled.projector * &sg)[(0, 0)] / (n * n);
        assert!((w.sum - expected).abs() < 1e-12);
    }
}
