//! Monte Carlo engine. Each replication draws its data from its own RNG
//! stream, fits every needed secondary outcome once, builds the estimators'
//! weights once, and then solves the primary equation for every `beta2`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{gen_case1, true_zero_positions, Case2Generator, SimDraw};
use super::metrics::{aggregate, MetricsTable};
use super::{rng_stream, Case, SimulationConfig};
use crate::error::{PepsiError, Result};
use crate::integrators::{Integration, Method};
use crate::model_spec::{apply_zero_constraints, Family, ModelSpec};
use crate::pel::{bic_select, el_fit, PenaltyConfig, SecondaryFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub method: Method,
    /// Secondary outcomes used by the arm (1-based).
    pub outcomes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPlan {
    pub case: Case,
    pub n: usize,
    pub rho: f64,
    pub beta2: Vec<f64>,
    pub arms: Vec<Arm>,
    pub reps: usize,
    pub seed: u64,
    pub misspecify: bool,
    pub level: f64,
    pub penalty: PenaltyConfig,
    pub vis_zeros: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ArmEstimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    /// Indexed `[beta2][arm]`; `Err` holds the failure message.
    pub results: Vec<Vec<std::result::Result<ArmEstimate, String>>>,
    /// Detected zero positions for each fitted secondary outcome.
    pub zero_sets: BTreeMap<usize, std::result::Result<Vec<usize>, String>>,
}

impl McPlan {
    fn needed_outcomes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .arms
            .iter()
            .flat_map(|a| a.outcomes.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn penalized_outcomes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .arms
            .iter()
            .filter(|a| matches!(a.method, Method::Psi | Method::Pepsi | Method::Avg))
            .flat_map(|a| a.outcomes.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

pub fn primary_spec() -> ModelSpec {
    ModelSpec::new(Family::Linear, super::dgp::N_COVARIATES)
}

/// Secondary working models have no intercept.
pub fn secondary_spec(n_covariates: usize) -> ModelSpec {
    ModelSpec::new(Family::Linear, n_covariates).without_intercept()
}

/// Draw the data for one replication.
pub fn draw(plan: &McPlan, gen2: Option<&Case2Generator>, rep: usize) -> Result<SimDraw> {
    let mut rng = rng_stream(plan.seed, rep as u64);
    match plan.case {
        Case::Case1 => gen_case1(plan.n, plan.rho, plan.misspecify, &mut rng),
        Case::Case2 => {
            let g =
                gen2.ok_or_else(|| PepsiError::InvalidArgument("missing Case 2 generator".into()))?;
            g.generate(plan.n, &plan.needed_outcomes(), &mut rng)
        }
    }
}

/// Per-arm estimators and per-outcome secondary fits; failures carry the
/// error message.
pub type DrawIntegrations = (
    Vec<std::result::Result<Integration, String>>,
    BTreeMap<usize, std::result::Result<SecondaryFit, String>>,
);

/// Build every arm's estimator for one draw. Shared secondary fits are
/// computed once.
pub fn build_integrations(plan: &McPlan, draw: &SimDraw) -> DrawIntegrations {
    let mut fits = BTreeMap::new();
    for m in plan.penalized_outcomes() {
        let res = match draw.secondary(m) {
            Some(s) => bic_select(s, &secondary_spec(s.x().ncols()), &plan.penalty)
                .map_err(|e| e.to_string()),
            None => Err(format!("secondary outcome {m} not generated")),
        };
        fits.insert(m, res);
    }
    let n = draw.n();
    let integrations = plan
        .arms
        .iter()
        .map(|arm| build_arm(plan, draw, arm, &fits, n).map_err(|e| e.to_string()))
        .collect();
    (integrations, fits)
}

fn collect_fits(
    arm: &Arm,
    fits: &BTreeMap<usize, std::result::Result<SecondaryFit, String>>,
) -> Result<Vec<SecondaryFit>> {
    arm.outcomes
        .iter()
        .map(|m| match fits.get(m) {
            Some(Ok(f)) => Ok(f.clone()),
            Some(Err(e)) => Err(PepsiError::Validation(format!("secondary {m}: {e}"))),
            None => Err(PepsiError::Validation(format!("secondary {m} not fitted"))),
        })
        .collect()
}

fn build_arm(
    plan: &McPlan,
    draw: &SimDraw,
    arm: &Arm,
    fits: &BTreeMap<usize, std::result::Result<SecondaryFit, String>>,
    n: usize,
) -> Result<Integration> {
    let secondaries = || -> Result<Vec<_>> {
        arm.outcomes
            .iter()
            .map(|&m| {
                draw.secondary(m)
                    .cloned()
                    .ok_or_else(|| PepsiError::Validation(format!("secondary {m} not generated")))
            })
            .collect()
    };
    match arm.method {
        Method::Naive => Ok(Integration::naive(n)),
        Method::Psi => {
            let secs = secondaries()?;
            let fit = collect_fits(arm, fits)?.remove(0);
            Integration::psi_from_fit(&secs[0], fit, &plan.penalty)
        }
        Method::Vis => {
            let secs = secondaries()?;
            let s = &secs[0];
            let zeros = match &plan.vis_zeros {
                Some(z) => z.clone(),
                None => true_zero_positions(plan.case == Case::Case2, s.index, plan.misspecify),
            };
            let spec = apply_zero_constraints(&secondary_spec(s.x().ncols()), &zeros)?;
            if !spec.is_over_identified() {
                return Err(PepsiError::Validation(format!(
                    "VIS needs zero constraints; secondary {} has none",
                    s.index
                )));
            }
            let fit = el_fit(s, &spec, &plan.penalty)?;
            Integration::vis_from_fit(s, fit, &plan.penalty)
        }
        Method::Pepsi => Integration::pepsi_from_fits(&secondaries()?, collect_fits(arm, fits)?),
        Method::Avg => Integration::averaging_from_fits(
            &secondaries()?,
            collect_fits(arm, fits)?,
            &plan.penalty,
        ),
    }
}

pub fn run_rep(plan: &McPlan, gen2: Option<&Case2Generator>, rep: usize) -> RepOutcome {
    let spec = primary_spec();
    let fail_all = |msg: String| RepOutcome {
        rep,
        results: plan
            .beta2
            .iter()
            .map(|_| plan.arms.iter().map(|_| Err(msg.clone())).collect())
            .collect(),
        zero_sets: BTreeMap::new(),
    };
    let d = match draw(plan, gen2, rep) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let (integrations, fits) = build_integrations(plan, &d);
    let results = plan
        .beta2
        .iter()
        .map(|&b2| {
            let primary = d.primary(b2);
            integrations
                .iter()
                .map(|integ| match integ {
                    Ok(i) => i
                        .estimate(&spec, &primary)
                        .map(|e| ArmEstimate {
                            beta: e.beta_hat.iter().copied().collect(),
                            se: (0..e.covariance.nrows())
                                .map(|j| e.covariance[(j, j)].sqrt())
                                .collect(),
                        })
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                })
                .collect()
        })
        .collect();
    let zero_sets = fits
        .into_iter()
        .map(|(m, f)| (m, f.map(|f| f.zero_index_set)))
        .collect();
    RepOutcome {
        rep,
        results,
        zero_sets,
    }
}

/// Run every replication (in parallel) and return them in replication order.
pub fn run_plan_reps(plan: &McPlan) -> Result<Vec<RepOutcome>> {
    if plan.reps == 0 {
        return Err(PepsiError::InvalidArgument(
            "reps must be at least 1".into(),
        ));
    }
    let gen2 = match plan.case {
        Case::Case2 => Some(Case2Generator::new()?),
        Case::Case1 => None,
    };
    Ok((0..plan.reps)
        .into_par_iter()
        .map(|r| run_rep(plan, gen2.as_ref(), r))
        .collect())
}

pub fn run_plan(plan: &McPlan) -> Result<(MetricsTable, Vec<RepOutcome>)> {
    let reps = run_plan_reps(plan)?;
    Ok((aggregate(plan, &reps), reps))
}

pub fn run_mc(config: &SimulationConfig) -> Result<MetricsTable> {
    let plan = config.to_plan()?;
    Ok(run_plan(&plan)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_table() {
        let cfg = SimulationConfig {
            n: 120,
            reps: 4,
            methods: vec![Method::Naive, Method::Psi, Method::Vis, Method::Pepsi],
            ..Default::default()
        };
        let a = run_mc(&cfg).unwrap();
        let b = run_mc(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_rep_has_no_mcsd() {
        let cfg = SimulationConfig {
            n: 100,
            reps: 1,
            ..Default::default()
        };
        let t = run_mc(&cfg).unwrap();
        assert!(t.rows.iter().all(|r| r.mcsd.is_none()));
        assert!(t.rows.iter().all(|r| r.successes == 1));
    }
}
