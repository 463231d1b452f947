//! Aggregation of replication results into per-coefficient metrics.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::dgp::primary_coefficients;
use super::engine::{McPlan, RepOutcome};
use crate::integrators::Method;

/// Share of failed replications above which a row is flagged.
pub const FAILURE_FLAG: f64 = 0.02;

pub const COEFFICIENT_NAMES: [&str; 5] = ["beta0", "beta1", "beta2", "beta3", "beta4"];

/// Raw (unscaled) metrics; bias, MCSD, SE, CP and rejection rate are
/// fractions/values on the coefficient scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub n: usize,
    pub beta2: f64,
    pub arm: String,
    pub method: Method,
    pub n_outcomes: usize,
    pub coefficient: String,
    pub truth: f64,
    pub bias: f64,
    pub mcsd: Option<f64>,
    pub mean_se: f64,
    pub median_se: f64,
    pub cp: f64,
    /// MC variance of naive over MC variance of the method.
    pub re: Option<f64>,
    pub rejection_rate: f64,
    pub successes: usize,
    pub failures: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn get(&self, beta2: f64, arm: &str, coefficient: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.beta2 == beta2 && r.arm == arm && r.coefficient == COEFFICIENT_NAMES[coefficient]
        })
    }

    pub fn arm(&self, beta2: f64, arm: &str) -> Vec<&MetricRow> {
        self.rows
            .iter()
            .filter(|r| r.beta2 == beta2 && r.arm == arm)
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Serial aggregation in replication order, so the table does not depend on
/// how replications were scheduled.
pub fn aggregate(plan: &McPlan, reps: &[RepOutcome]) -> MetricsTable {
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - plan.level) / 2.0);
    let mut rows = Vec::new();
    for (bi, &b2) in plan.beta2.iter().enumerate() {
        let truth = primary_coefficients(b2);
        let p = truth.len();
        let naive_idx = plan.arms.iter().position(|a| a.method == Method::Naive);
        let mut sd_by_arm: Vec<Vec<Option<f64>>> = Vec::new();
        let mut arm_rows: Vec<Vec<MetricRow>> = Vec::new();
        for (ai, arm) in plan.arms.iter().enumerate() {
            let ok: Vec<_> = reps
                .iter()
                .filter_map(|r| r.results[bi][ai].as_ref().ok())
                .collect();
            let failures = reps.len() - ok.len();
            let flagged = failures as f64 > FAILURE_FLAG * reps.len() as f64;
            let mut sds = Vec::with_capacity(p);
            let mut rws = Vec::with_capacity(p);
            for j in 0..p {
                let est: Vec<f64> = ok.iter().map(|e| e.beta[j]).collect();
                let se: Vec<f64> = ok.iter().map(|e| e.se[j]).collect();
                let (bias, mcsd, mean_se, median_se, cp, rej) = if est.is_empty() {
                    (f64::NAN, None, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                } else {
                    let cover = est
                        .iter()
                        .zip(&se)
                        .filter(|(b, s)| (*b - truth[j]).abs() <= z * *s)
                        .count();
                    let reject = est
                        .iter()
                        .zip(&se)
                        .filter(|(b, s)| b.abs() > z * *s)
                        .count();
                    let k = est.len() as f64;
                    (
                        mean(&est) - truth[j],
                        sample_sd(&est),
                        mean(&se),
                        median(&se),
                        cover as f64 / k,
                        reject as f64 / k,
                    )
                };
                sds.push(mcsd);
                rws.push(MetricRow {
                    n: plan.n,
                    beta2: b2,
                    arm: arm.label.clone(),
                    method: arm.method,
                    n_outcomes: arm.outcomes.len(),
                    coefficient: COEFFICIENT_NAMES[j].to_string(),
                    truth: truth[j],
                    bias,
                    mcsd,
                    mean_se,
                    median_se,
                    cp,
                    re: None,
                    rejection_rate: rej,
                    successes: ok.len(),
                    failures,
                    flagged,
                });
            }
            sd_by_arm.push(sds);
            arm_rows.push(rws);
        }
        for rws in arm_rows.iter_mut() {
            for (j, row) in rws.iter_mut().enumerate() {
                let own = sd_by_arm[plan.arms.iter().position(|a| a.label == row.arm).unwrap()][j];
                row.re = match (naive_idx.and_then(|k| sd_by_arm[k][j]), own) {
                    (Some(nv), Some(ov)) if ov > 0.0 => Some((nv / ov).powi(2)),
                    _ => None,
                };
            }
        }
        rows.extend(arm_rows.into_iter().flatten());
    }
    MetricsTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_helpers() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(sample_sd(&[1.0]), None);
        assert!((sample_sd(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
