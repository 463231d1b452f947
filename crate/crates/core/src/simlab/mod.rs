//! Simulation designs, the Monte Carlo engine and metric aggregation.

pub mod dgp;
mod engine;
mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use engine::{
    build_integrations, draw, primary_spec, run_mc, run_plan, run_plan_reps, run_rep,
    secondary_spec, Arm, ArmEstimate, McPlan, RepOutcome,
};
pub use metrics::{aggregate, MetricRow, MetricsTable, COEFFICIENT_NAMES, FAILURE_FLAG};

use crate::error::{PepsiError, Result};
use crate::integrators::Method;
use crate::pel::PenaltyConfig;

/// Independent generator for replication `rep` under `seed`.
pub fn rng_stream(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Case1,
    Case2,
}

impl std::str::FromStr for Case {
    type Err = PepsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "case1" | "1" => Ok(Case::Case1),
            "case2" | "2" => Ok(Case::Case2),
            other => Err(PepsiError::Validation(format!(
                "unknown case '{other}' (expected case1 or case2)"
            ))),
        }
    }
}

impl std::fmt::Display for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Case::Case1 => "case1",
            Case::Case2 => "case2",
        })
    }
}

/// A named selection of Case 2 secondary outcomes (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSet {
    pub label: String,
    pub outcomes: Vec<usize>,
}

pub const OUTCOME_PRESETS: [&str; 4] = ["m5", "m10", "m30", "m50"];

/// Outcome sets used in the multi-outcome study.
pub fn outcome_preset(name: &str) -> Result<OutcomeSet> {
    let outcomes: Vec<usize> = match name {
        "m5" => vec![1, 7, 11, 12, 13],
        "m10" => std::iter::once(1).chain(7..=15).collect(),
        "m30" => [1, 2].into_iter().chain(6..=33).collect(),
        "m50" => (1..=50).collect(),
        other => {
            return Err(PepsiError::Validation(format!(
                "unknown outcome preset '{other}' (available: {})",
                OUTCOME_PRESETS.join(", ")
            )))
        }
    };
    Ok(OutcomeSet {
        label: name.to_string(),
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub case: Case,
    pub n: usize,
    /// Case 1 residual correlation.
    pub rho: f64,
    /// Case 2 outcome selections; PEPSI and averaging get one arm per set.
    pub outcome_sets: Vec<OutcomeSet>,
    /// Primary `beta2` values; the same draws are reused for each.
    pub beta2: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Case 1: drop `X1` from the secondary working model.
    pub misspecify: bool,
    pub level: f64,
    pub penalty: PenaltyConfig,
    /// VIS zero constraints (0-based positions); defaults to the true zeros.
    pub vis_zeros: Option<Vec<usize>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            case: Case::Case1,
            n: 600,
            rho: 0.8,
            outcome_sets: vec![OutcomeSet {
                label: "m1".into(),
                outcomes: vec![1],
            }],
            beta2: vec![1.0],
            reps: 2000,
            seed: 1,
            methods: vec![Method::Naive, Method::Psi],
            misspecify: false,
            level: 0.95,
            penalty: PenaltyConfig::default(),
            vis_zeros: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(PepsiError::InvalidArgument(
                "reps must be at least 1".into(),
            ));
        }
        if self.n < dgp::N_COVARIATES + 3 {
            return Err(PepsiError::InvalidArgument(format!(
                "n must be at least {}",
                dgp::N_COVARIATES + 3
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(PepsiError::InvalidArgument(format!(
                "rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(PepsiError::InvalidArgument(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.methods.is_empty() {
            return Err(PepsiError::InvalidArgument("no methods requested".into()));
        }
        if self.beta2.is_empty() || self.beta2.iter().any(|b| !b.is_finite()) {
            return Err(PepsiError::InvalidArgument(
                "beta2 grid must be non-empty and finite".into(),
            ));
        }
        if self.outcome_sets.is_empty() || self.outcome_sets.iter().any(|s| s.outcomes.is_empty()) {
            return Err(PepsiError::InvalidArgument(
                "outcome selection is empty".into(),
            ));
        }
        if self.case == Case::Case1 && self.outcome_sets.iter().any(|s| s.outcomes != [1]) {
            return Err(PepsiError::InvalidArgument(
                "Case 1 has a single secondary outcome".into(),
            ));
        }
        if self.misspecify && self.case != Case::Case1 {
            return Err(PepsiError::InvalidArgument(
                "misspecification applies to Case 1 only".into(),
            ));
        }
        self.penalty.validate()
    }

    pub fn to_plan(&self) -> Result<McPlan> {
        self.validate()?;
        let mut arms = Vec::new();
        let multi = self.outcome_sets.len() > 1;
        let first = self.outcome_sets[0].outcomes[0];
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        for m in methods {
            match m {
                Method::Naive | Method::Psi | Method::Vis => arms.push(Arm {
                    label: m.to_string(),
                    method: m,
                    outcomes: if m == Method::Naive {
                        vec![]
                    } else {
                        vec![first]
                    },
                }),
                Method::Avg | Method::Pepsi => {
                    for set in &self.outcome_sets {
                        arms.push(Arm {
                            label: if multi {
                                format!("{m}-{}", set.label)
                            } else {
                                m.to_string()
                            },
                            method: m,
                            outcomes: set.outcomes.clone(),
                        });
                    }
                }
            }
        }
        Ok(McPlan {
            case: self.case,
            n: self.n,
            rho: self.rho,
            beta2: self.beta2.clone(),
            arms,
            reps: self.reps,
            seed: self.seed,
            misspecify: self.misspecify,
            level: self.level,
            penalty: self.penalty.clone(),
            vis_zeros: self.vis_zeros.clone(),
        })
    }
}
