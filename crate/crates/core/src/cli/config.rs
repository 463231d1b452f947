//! Run configuration: command-line flags merged over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PepsiError, Result};
use crate::integrators::Method;
use crate::model_spec::Family;
use crate::pel::PenaltyConfig;
use crate::simlab::{outcome_preset, Case, OutcomeSet, OUTCOME_PRESETS};

/// Every option of every subcommand. The same names (with dashes) are the
/// keys of the TOML config file; flags given on the command line win.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    /// TOML file with any of these options (flags override it).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub primary_outcome: Option<String>,
    /// Covariate columns; `a:b` adds the product of columns a and b.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub secondary_outcomes: Option<Vec<String>>,
    /// Primary model family.
    #[arg(long)]
    pub family: Option<Family>,
    /// Secondary working-model family.
    #[arg(long)]
    pub secondary_family: Option<Family>,
    /// Give the secondary working models a free intercept.
    #[arg(long)]
    pub secondary_intercept: Option<bool>,
    /// Covariates known to have zero secondary coefficients (VIS), by name
    /// for `fit` and by 1-based covariate position for simulations.
    #[arg(long, value_delimiter = ',')]
    pub vis_zeros: Option<Vec<String>>,

    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Explicit penalty grid; by default a data-driven log-spaced grid.
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub scad_a: Option<f64>,
    /// Coefficients below this magnitude are set to zero during PEL.
    #[arg(long)]
    pub gamma: Option<f64>,

    #[arg(long)]
    pub case: Option<Case>,
    /// Sample size(s); `curves` takes a list.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Primary beta2 value(s); simulations reuse the same draws for each.
    #[arg(long, value_delimiter = ',')]
    pub beta2: Option<Vec<f64>>,
    /// Outcome-set presets (m5, m10, m30, m50) or, for `curves`, fig3.
    #[arg(long, value_delimiter = ',')]
    pub preset: Option<Vec<String>>,
    /// Explicit Case 2 secondary outcomes (1-based), used instead of a preset.
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Option<Vec<usize>>,
    /// Case 1: drop X1 from the secondary working model.
    #[arg(long)]
    pub misspecify: Option<bool>,
    /// Coefficient reported by `power` and `curves` (name such as beta2, or index).
    #[arg(long)]
    pub coef: Option<String>,

    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one simulated replication as CSV (readable by `fit`).
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    /// Replication written by `--emit-data`.
    #[arg(long)]
    pub emit_rep: Option<usize>,
    /// Also render an SVG line chart.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunArgs {
    /// Load the config file (if any) and apply the flags on top of it.
    pub fn merged(self) -> Result<RunArgs> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            PepsiError::Validation(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut base: RunArgs = toml::from_str(&text).map_err(|e| {
            PepsiError::Validation(format!("invalid config file {}: {e}", path.display()))
        })?;
        let flags = self;
        overlay!(base, flags;
            config, data, primary_outcome, covariates, secondary_outcomes, family,
            secondary_family, secondary_intercept, vis_zeros, methods, level, tau_grid,
            scad_a, gamma, case, n, rho, reps, seed, beta2, preset, outcomes, misspecify,
            coef, out, emit_data, emit_rep, svg);
        Ok(base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fit,
    Simulate,
    Power,
    Curves,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fit => "fit",
            Mode::Simulate => "simulate",
            Mode::Power => "power",
            Mode::Curves => "curves",
        })
    }
}

/// Curve presets accepted by `curves --preset`, besides the outcome presets.
pub const CURVE_PRESETS: [&str; 1] = ["fig3"];

/// Fully resolved configuration; this is what gets hashed into provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub data: Option<PathBuf>,
    pub primary_outcome: Option<String>,
    pub covariates: Vec<String>,
    pub secondary_outcomes: Vec<String>,
    pub family: Family,
    pub secondary_family: Family,
    pub secondary_intercept: bool,
    pub vis_zeros: Vec<String>,
    pub methods: Vec<Method>,
    pub level: f64,
    pub penalty: PenaltyConfig,
    pub case: Case,
    pub n: Vec<usize>,
    pub rho: f64,
    pub reps: usize,
    pub seed: u64,
    pub beta2: Vec<f64>,
    pub outcome_sets: Vec<OutcomeSet>,
    pub misspecify: bool,
    pub coef: usize,
    pub out: PathBuf,
    pub emit_data: Option<PathBuf>,
    pub emit_rep: usize,
    pub svg: Option<PathBuf>,
}

fn parse_coef(s: &str) -> Result<usize> {
    let t = s.trim().to_ascii_lowercase();
    let idx = t
        .strip_prefix("beta")
        .unwrap_or(&t)
        .parse::<usize>()
        .map_err(|_| {
            PepsiError::Validation(format!("unknown coefficient '{s}' (expected beta0..beta4)"))
        })?;
    if idx > crate::simlab::dgp::N_COVARIATES {
        return Err(PepsiError::Validation(format!(
            "unknown coefficient '{s}' (expected beta0..beta4)"
        )));
    }
    Ok(idx)
}

fn outcome_sets(mode: Mode, case: Case, a: &RunArgs) -> Result<Vec<OutcomeSet>> {
    if case == Case::Case1 {
        if a.preset.is_some() || a.outcomes.is_some() {
            return Err(PepsiError::Validation(
                "--preset/--outcomes select Case 2 outcomes; Case 1 has a single secondary outcome"
                    .into(),
            ));
        }
        return Ok(vec![OutcomeSet {
            label: "m1".into(),
            outcomes: vec![1],
        }]);
    }
    if let Some(list) = &a.outcomes {
        return Ok(vec![OutcomeSet {
            label: format!("m{}", list.len()),
            outcomes: list.clone(),
        }]);
    }
    let default = match mode {
        Mode::Power => vec!["m50".to_string()],
        Mode::Curves => vec!["fig3".to_string()],
        _ => vec!["m10".to_string()],
    };
    let names = a.preset.clone().unwrap_or(default);
    let mut sets = Vec::new();
    for name in names {
        if name == "fig3" {
            if mode != Mode::Curves {
                return Err(PepsiError::Validation(format!(
                    "preset 'fig3' is a curves preset; available outcome presets: {}",
                    OUTCOME_PRESETS.join(", ")
                )));
            }
            for p in OUTCOME_PRESETS {
                sets.push(outcome_preset(p)?);
            }
        } else {
            sets.push(outcome_preset(&name).map_err(|_| {
                let mut all: Vec<&str> = OUTCOME_PRESETS.to_vec();
                if mode == Mode::Curves {
                    all.extend(CURVE_PRESETS);
                }
                PepsiError::Validation(format!(
                    "unknown preset '{name}' (available: {})",
                    all.join(", ")
                ))
            })?);
        }
    }
    sets.dedup();
    Ok(sets)
}

impl RunConfig {
    pub fn resolve(mode: Mode, a: RunArgs) -> Result<RunConfig> {
        let a = a.merged()?;
        let defaults = PenaltyConfig::default();
        let penalty = PenaltyConfig {
            a: a.scad_a.unwrap_or(defaults.a),
            gamma: a.gamma.unwrap_or(defaults.gamma),
            tau_grid: a.tau_grid.clone(),
            ..defaults
        };
        penalty.validate()?;

        let case = a.case.unwrap_or(match mode {
            Mode::Power | Mode::Curves => Case::Case2,
            _ => Case::Case1,
        });
        let n = a.n.clone().unwrap_or(match mode {
            Mode::Power => vec![300],
            Mode::Curves => vec![150, 300, 600, 1200],
            _ => vec![600],
        });
        let methods = a.methods.clone().unwrap_or(match mode {
            Mode::Fit => vec![Method::Naive, Method::Pepsi],
            Mode::Curves => vec![Method::Naive, Method::Avg, Method::Pepsi],
            Mode::Power if case == Case::Case2 => vec![Method::Naive, Method::Avg, Method::Pepsi],
            _ => Method::ALL.to_vec(),
        });
        let beta2 = a.beta2.clone().unwrap_or(match mode {
            Mode::Power => vec![0.0, 0.05, 0.1, 0.15, 0.2],
            _ => vec![1.0],
        });
        let level = a.level.unwrap_or(0.95);
        if !(level > 0.0 && level < 1.0) {
            return Err(PepsiError::Validation(format!(
                "--level must lie in (0, 1), got {level}"
            )));
        }
        let outcome_sets = if mode == Mode::Fit {
            Vec::new()
        } else {
            outcome_sets(mode, case, &a)?
        };
        let cfg = RunConfig {
            mode,
            data: a.data.clone(),
            primary_outcome: a.primary_outcome.clone(),
            covariates: a.covariates.clone().unwrap_or_default(),
            secondary_outcomes: a.secondary_outcomes.clone().unwrap_or_default(),
            family: a.family.unwrap_or(Family::Linear),
            secondary_family: a.secondary_family.unwrap_or(Family::Linear),
            secondary_intercept: a.secondary_intercept.unwrap_or(true),
            vis_zeros: a.vis_zeros.clone().unwrap_or_default(),
            methods,
            level,
            penalty,
            case,
            n,
            rho: a.rho.unwrap_or(0.8),
            reps: a.reps.unwrap_or(2000),
            seed: a.seed.unwrap_or(1),
            beta2,
            outcome_sets,
            misspecify: a.misspecify.unwrap_or(false),
            coef: parse_coef(a.coef.as_deref().unwrap_or("beta2"))?,
            out: a.out.clone().unwrap_or_else(|| PathBuf::from("pepsi-out")),
            emit_data: a.emit_data.clone(),
            emit_rep: a.emit_rep.unwrap_or(0),
            svg: a.svg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(PepsiError::Validation("--methods is empty".into()));
        }
        match self.mode {
            Mode::Fit => {
                let data = self
                    .data
                    .as_ref()
                    .ok_or_else(|| PepsiError::Validation("fit needs --data".into()))?;
                if !data.is_file() {
                    return Err(PepsiError::Validation(format!(
                        "data file {} does not exist",
                        data.display()
                    )));
                }
                if self.primary_outcome.is_none() {
                    return Err(PepsiError::Validation("fit needs --primary-outcome".into()));
                }
                if self.covariates.is_empty() {
                    return Err(PepsiError::Validation("fit needs --covariates".into()));
                }
                let needs_secondary = self.methods.iter().any(|m| *m != Method::Naive);
                if needs_secondary && self.secondary_outcomes.is_empty() {
                    return Err(PepsiError::Validation(
                        "the requested methods need --secondary-outcomes".into(),
                    ));
                }
                if self.methods.contains(&Method::Vis) && self.vis_zeros.is_empty() {
                    return Err(PepsiError::Validation("vis needs --vis-zeros".into()));
                }
            }
            Mode::Simulate | Mode::Power | Mode::Curves => {
                if self.reps == 0 {
                    return Err(PepsiError::Validation("--reps must be at least 1".into()));
                }
                if self.n.is_empty() {
                    return Err(PepsiError::Validation("--n is empty".into()));
                }
                if self.emit_data.is_some() && self.emit_rep >= self.reps {
                    return Err(PepsiError::Validation(format!(
                        "--emit-rep {} is out of range for {} replications",
                        self.emit_rep, self.reps
                    )));
                }
                for z in &self.vis_zeros {
                    z.parse::<usize>()
                        .ok()
                        .filter(|k| (1..=crate::simlab::dgp::N_COVARIATES).contains(k))
                        .ok_or_else(|| {
                            PepsiError::Validation(format!(
                                "--vis-zeros for simulations takes covariate positions 1..={}, got '{z}'",
                                crate::simlab::dgp::N_COVARIATES
                            ))
                        })?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration (hex).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn ensure_out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}
