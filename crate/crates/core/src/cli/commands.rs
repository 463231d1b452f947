//! The `fit`, `simulate`, `power` and `curves` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{Mode, RunConfig};
use super::ingest::{ingest_csv, Roles};
use super::output::{
    opt6, render_table, sig6, svg_line_chart, write_csv, write_json, write_text, Series,
};
use crate::error::{PepsiError, Result};
use crate::integrators::{fit_secondaries, Integration, Method, PrimaryFit};
use crate::model_spec::{apply_zero_constraints, ModelSpec, PrimaryDataset, SecondaryDataset};
use crate::pel::SecondaryFit;
use crate::simlab::dgp::{Case2Generator, N_COVARIATES};
use crate::simlab::COEFFICIENT_NAMES;
use crate::simlab::{
    draw, rng_stream, run_plan, run_rep, Case, McPlan, MetricRow, SimulationConfig,
};
use crate::variance::{sample_size_check, wald_inference};

pub fn error_record(e: &PepsiError) -> Value {
    json!({
        "error": e.to_string(),
        "kind": e.kind(),
        "exit_code": e.exit_code(),
    })
}

fn methods_with_naive(methods: &[Method]) -> Vec<Method> {
    let mut out = vec![Method::Naive];
    for m in methods {
        if !out.contains(m) {
            out.push(*m);
        }
    }
    out
}

fn secondary_summary(fit: &SecondaryFit, name: &str, coef_names: &[String]) -> Value {
    let zero_names: Vec<&str> = fit
        .zero_index_set
        .iter()
        .map(|&j| {
            coef_names
                .get(fit.spec.free_indices()[j])
                .map(|s| s.as_str())
                .unwrap_or("?")
        })
        .collect();
    json!({
        "outcome": name,
        "theta_hat": fit.theta_full().iter().copied().collect::<Vec<_>>(),
        "zero_set": zero_names,
        "q_hat": fit.q_hat,
        "tau_selected": fit.tau_selected,
        "bic": fit.bic_value,
        "log_el_ratio": fit.log_ratio,
        "converged": fit.converged,
        "iterations": fit.iterations,
    })
}

struct FitContext<'a> {
    cfg: &'a RunConfig,
    primary: &'a PrimaryDataset,
    secondaries: &'a [SecondaryDataset],
    spec_primary: ModelSpec,
    spec_secondary: ModelSpec,
    secondary_names: Vec<String>,
}

impl FitContext<'_> {
    fn vis_spec(&self) -> Result<ModelSpec> {
        let offset = usize::from(self.spec_secondary.intercept);
        let names = self.primary.covariate_names();
        let zeros = self
            .cfg
            .vis_zeros
            .iter()
            .map(|z| {
                names
                    .iter()
                    .position(|c| c == z)
                    .map(|k| k + offset)
                    .ok_or_else(|| {
                        PepsiError::Validation(format!(
                            "--vis-zeros column '{z}' is not a covariate (covariates: {})",
                            names.join(", ")
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        apply_zero_constraints(&self.spec_secondary, &zeros)
    }

    /// `fits` holds the shared secondary fits (PSI uses the first).
    fn run(&self, method: Method, fits: &[SecondaryFit]) -> Result<PrimaryFit> {
        let integration = match method {
            Method::Naive => Integration::naive(self.primary.n()),
            Method::Psi => {
                Integration::psi_from_fit(&self.secondaries[0], fits[0].clone(), &self.cfg.penalty)?
            }
            Method::Vis => {
                let spec = self.vis_spec()?;
                if !spec.is_over_identified() {
                    return Err(PepsiError::Validation(
                        "vis needs at least one zero constraint".into(),
                    ));
                }
                let fit = crate::pel::el_fit(&self.secondaries[0], &spec, &self.cfg.penalty)?;
                Integration::vis_from_fit(&self.secondaries[0], fit, &self.cfg.penalty)?
            }
            Method::Pepsi => Integration::pepsi_from_fits(self.secondaries, fits.to_vec())?,
            Method::Avg => Integration::averaging_from_fits(
                self.secondaries,
                fits.to_vec(),
                &self.cfg.penalty,
            )?,
        };
        integration.fit(&self.spec_primary, self.primary)
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<i32> {
    let roles = Roles {
        primary_outcome: cfg.primary_outcome.clone().unwrap_or_default(),
        covariates: cfg.covariates.clone(),
        secondary_outcomes: cfg.secondary_outcomes.clone(),
    };
    let data = cfg.data.as_ref().expect("validated");
    let ing = ingest_csv(data, &roles)?;
    if ing.rows_dropped > 0 {
        eprintln!(
            "dropped {} row{} with missing values ({} of {} rows used)",
            ing.rows_dropped,
            if ing.rows_dropped == 1 { "" } else { "s" },
            ing.primary.n(),
            ing.rows_read
        );
    }
    ing.primary.check_family(cfg.family)?;

    let ncov = cfg.covariates.len();
    let spec_primary = ModelSpec::new(cfg.family, ncov);
    let spec_secondary =
        ModelSpec::new(cfg.secondary_family, ncov).with_intercept(cfg.secondary_intercept);
    let coef_names = spec_primary.coefficient_names(ing.primary.covariate_names());
    let sec_coef_names = spec_secondary.coefficient_names(ing.primary.covariate_names());
    let ctx = FitContext {
        cfg,
        primary: &ing.primary,
        secondaries: &ing.secondaries,
        spec_primary,
        spec_secondary: spec_secondary.clone(),
        secondary_names: cfg.secondary_outcomes.clone(),
    };
    let methods = methods_with_naive(&cfg.methods);
    let mut warnings = Vec::new();
    if ing.secondaries.len() > 1
        && methods
            .iter()
            .any(|m| matches!(m, Method::Psi | Method::Vis))
    {
        warnings.push(format!(
            "psi/vis use a single secondary outcome; using '{}'",
            ctx.secondary_names[0]
        ));
    }
    let needs_fits = methods
        .iter()
        .any(|m| matches!(m, Method::Psi | Method::Pepsi | Method::Avg));
    let fits = if needs_fits {
        let specs = vec![spec_secondary; ing.secondaries.len()];
        fit_secondaries(&ing.secondaries, &specs, &cfg.penalty)
    } else {
        Ok(Vec::new())
    };

    let mut naive_cov = None;
    let mut records = Vec::new();
    let mut csv_rows = Vec::new();
    let mut human = String::new();
    let mut status = 0;
    let p0 = ctx.spec_primary.dim_theta();
    for &m in &methods {
        let uses_fits = matches!(m, Method::Psi | Method::Pepsi | Method::Avg);
        let attempt = match &fits {
            Err(e) if uses_fits => Err(e),
            Err(_) => Ok(&[][..]),
            Ok(f) => Ok(f.as_slice()),
        };
        let outcome = match attempt {
            Err(e) => Err(Err(e)),
            Ok(f) => ctx
                .run(m, f)
                .and_then(|fit| {
                    let reference = if m == Method::Naive {
                        Some(&fit.covariance)
                    } else {
                        naive_cov.as_ref()
                    };
                    let table = wald_inference(
                        &fit.beta_hat,
                        &fit.covariance,
                        cfg.level,
                        reference,
                        &coef_names,
                    )?;
                    Ok((fit, table))
                })
                .map_err(Ok),
        };
        match outcome {
            Ok((fit, table)) => {
                if m == Method::Naive {
                    naive_cov = Some(fit.covariance.clone());
                }
                let check = sample_size_check(p0, fit.k_hat, ing.primary.n(), m);
                if !check.pass {
                    let msg = format!(
                        "{m}: n = {} is below the recommended {} (p0 = {p0}, K = {})",
                        check.n, check.threshold, check.k_hat
                    );
                    eprintln!("warning: {msg}");
                    warnings.push(msg);
                }
                for w in &fit.warnings {
                    warnings.push(format!("{m}: {w}"));
                }
                let secondary: Vec<Value> = fit
                    .secondary_fits
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let name = if m == Method::Psi || m == Method::Vis {
                            &ctx.secondary_names[0]
                        } else {
                            &ctx.secondary_names[i]
                        };
                        secondary_summary(f, name, &sec_coef_names)
                    })
                    .collect();
                records.push(json!({
                    "method": m,
                    "status": "ok",
                    "coefficients": table.rows,
                    "k_hat": fit.k_hat,
                    "rank_reduced": fit.rank_reduced,
                    "weights": {
                        "min": fit.weights_used.min_weight,
                        "sum": fit.weights_used.sum,
                        "negative": fit.weights_used.n_negative,
                    },
                    "mixing_weights": fit.mixing_weights,
                    "score_norm": fit.score_norm,
                    "sample_size_check": check,
                    "secondary_fits": secondary,
                    "warnings": fit.warnings,
                }));
                let mut rows = Vec::new();
                for r in &table.rows {
                    csv_rows.push(vec![
                        m.to_string(),
                        r.name.clone(),
                        sig6(r.estimate),
                        sig6(r.se),
                        sig6(r.lower),
                        sig6(r.upper),
                        sig6(r.p_value),
                        opt6(r.re),
                    ]);
                    rows.push(vec![
                        r.name.clone(),
                        format!("{:.4}", r.estimate),
                        format!("{:.4}", r.se),
                        format!("{:.4}", r.lower),
                        format!("{:.4}", r.upper),
                        format_p(r.p_value),
                        r.re.map(|v| format!("{v:.2}")).unwrap_or_default(),
                    ]);
                }
                let header: Vec<String> = ["", "EST", "SE", "LL", "UL", "P", "RE"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                human.push_str(&format!(
                    "{} (K = {})\n",
                    m.as_str().to_uppercase(),
                    fit.k_hat
                ));
                human.push_str(&render_table(&header, &rows));
                human.push('\n');
            }
            Err(err) => {
                let e: &PepsiError = match &err {
                    Ok(own) => own,
                    Err(shared) => shared,
                };
                eprintln!("error: {m}: {e}");
                status = status.max(e.exit_code());
                let mut rec = error_record(e);
                rec["method"] = json!(m);
                rec["status"] = json!("error");
                records.push(rec);
                if m == Method::Naive {
                    break;
                }
            }
        }
    }

    cfg.ensure_out_dir()?;
    let result = json!({
        "provenance": super::output::provenance_json(cfg),
        "data": {
            "path": data,
            "rows_read": ing.rows_read,
            "rows_dropped": ing.rows_dropped,
            "n": ing.primary.n(),
        },
        "level": cfg.level,
        "methods": records,
        "warnings": warnings,
    });
    write_json(&cfg.out_path("fit.json"), &result)?;
    write_csv(
        &cfg.out_path("fit.csv"),
        cfg,
        &[
            "method",
            "coefficient",
            "estimate",
            "se",
            "lower",
            "upper",
            "p_value",
            "re",
        ],
        &csv_rows,
    )?;
    write_text(&cfg.out_path("fit.txt"), cfg, &human)?;
    print!("{human}");
    for w in &warnings {
        println!("note: {w}");
    }
    Ok(status)
}

fn format_p(p: f64) -> String {
    if p < 1e-4 {
        "<1e-4".into()
    } else {
        format!("{p:.4}")
    }
}

fn simulation_config(cfg: &RunConfig, n: usize) -> SimulationConfig {
    SimulationConfig {
        case: cfg.case,
        n,
        rho: cfg.rho,
        outcome_sets: cfg.outcome_sets.clone(),
        beta2: cfg.beta2.clone(),
        reps: cfg.reps,
        seed: cfg.seed,
        methods: cfg.methods.clone(),
        misspecify: cfg.misspecify,
        level: cfg.level,
        penalty: cfg.penalty.clone(),
        vis_zeros: if cfg.vis_zeros.is_empty() {
            None
        } else {
            Some(
                cfg.vis_zeros
                    .iter()
                    .map(|z| z.parse::<usize>().expect("validated") - 1)
                    .collect(),
            )
        },
    }
}

fn run_for_each_n(cfg: &RunConfig) -> Result<Vec<(McPlan, Vec<MetricRow>)>> {
    let mut out = Vec::new();
    for &n in &cfg.n {
        let plan = simulation_config(cfg, n).to_plan()?;
        log::info!(
            "running {} replications at n = {n} ({} arms)",
            plan.reps,
            plan.arms.len()
        );
        let (table, _) = run_plan(&plan)?;
        for r in table.rows.iter().filter(|r| r.flagged) {
            eprintln!(
                "warning: n = {} beta2 = {} {}: {} of {} replications failed",
                r.n,
                r.beta2,
                r.arm,
                r.failures,
                r.failures + r.successes
            );
        }
        out.push((plan, table.rows));
    }
    Ok(out)
}

/// Write one replication's data (primary outcome at the first `beta2`) and
/// that replication's estimates.
fn emit_data(cfg: &RunConfig, path: &Path) -> Result<PathBuf> {
    if cfg.misspecify {
        return Err(PepsiError::Validation(
            "--emit-data writes shared covariates and cannot express the misspecified secondary model".into(),
        ));
    }
    let sim = simulation_config(cfg, cfg.n[0]);
    let plan = sim.to_plan()?;
    let gen2 = match cfg.case {
        Case::Case2 => Some(Case2Generator::new()?),
        Case::Case1 => None,
    };
    // Every configured outcome is written, even those no requested method uses.
    let d = match &gen2 {
        Some(g) => {
            let mut outcomes: Vec<usize> = sim
                .outcome_sets
                .iter()
                .flat_map(|s| s.outcomes.iter().copied())
                .collect();
            outcomes.sort_unstable();
            outcomes.dedup();
            g.generate(
                plan.n,
                &outcomes,
                &mut rng_stream(plan.seed, cfg.emit_rep as u64),
            )?
        }
        None => draw(&plan, None, cfg.emit_rep)?,
    };
    let primary = d.primary(plan.beta2[0]);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut header = vec!["Y".to_string()];
    header.extend((1..=N_COVARIATES).map(|k| format!("X{k}")));
    header.extend(d.secondaries.iter().map(|s| format!("S{}", s.index)));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for i in 0..d.n() {
        // Shortest round-trip representation keeps refits exact.
        let mut row = vec![primary.y()[i].to_string()];
        row.extend((0..N_COVARIATES).map(|k| d.x[(i, k)].to_string()));
        row.extend(d.secondaries.iter().map(|s| s.y()[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let outcome = run_rep(&plan, gen2.as_ref(), cfg.emit_rep);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let est_path = path.with_file_name(format!("{stem}_estimates.csv"));
    let mut rows = Vec::new();
    for (arm, res) in plan.arms.iter().zip(&outcome.results[0]) {
        match res {
            Ok(e) => {
                for j in 0..e.beta.len() {
                    rows.push(vec![
                        arm.label.clone(),
                        arm.method.to_string(),
                        arm.outcomes
                            .iter()
                            .map(|m| format!("S{m}"))
                            .collect::<Vec<_>>()
                            .join(" "),
                        COEFFICIENT_NAMES[j].to_string(),
                        e.beta[j].to_string(),
                        e.se[j].to_string(),
                    ]);
                }
            }
            Err(msg) => rows.push(vec![
                arm.label.clone(),
                arm.method.to_string(),
                String::new(),
                "error".into(),
                msg.clone(),
                String::new(),
            ]),
        }
    }
    write_csv(
        &est_path,
        cfg,
        &[
            "arm",
            "method",
            "secondary_outcomes",
            "coefficient",
            "estimate",
            "se",
        ],
        &rows,
    )?;
    Ok(est_path)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    cfg.ensure_out_dir()?;
    if let Some(path) = &cfg.emit_data {
        let est = emit_data(cfg, path)?;
        eprintln!(
            "wrote replication {} data to {} and its estimates to {}",
            cfg.emit_rep,
            path.display(),
            est.display()
        );
    }
    let results = run_for_each_n(cfg)?;
    let mut machine = Vec::new();
    let mut human = String::new();
    let header: Vec<String> = ["arm", "coef", "Bias", "MCSD", "SE", "CP", "RE"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (plan, rows) in &results {
        for &b2 in &plan.beta2 {
            let mut table = Vec::new();
            for r in rows.iter().filter(|r| r.beta2 == b2) {
                machine.push(vec![
                    r.n.to_string(),
                    sig6(r.beta2),
                    r.arm.clone(),
                    r.method.to_string(),
                    r.n_outcomes.to_string(),
                    r.coefficient.clone(),
                    sig6(r.truth),
                    sig6(r.bias),
                    opt6(r.mcsd),
                    sig6(r.mean_se),
                    sig6(r.median_se),
                    sig6(r.cp),
                    opt6(r.re),
                    sig6(r.rejection_rate),
                    r.successes.to_string(),
                    r.failures.to_string(),
                    r.flagged.to_string(),
                ]);
                table.push(vec![
                    r.arm.clone(),
                    r.coefficient.clone(),
                    format!("{:.1}", 100.0 * r.bias),
                    r.mcsd
                        .map(|v| format!("{:.1}", 100.0 * v))
                        .unwrap_or_else(|| "-".into()),
                    format!("{:.1}", 100.0 * r.mean_se),
                    format!("{:.1}", 100.0 * r.cp),
                    r.re.map(|v| format!("{v:.2}"))
                        .unwrap_or_else(|| "-".into()),
                ]);
            }
            human.push_str(&format!(
                "{} n = {} beta2 = {} reps = {} (Bias, MCSD, SE, CP x 100)\n",
                plan.case, plan.n, b2, plan.reps
            ));
            human.push_str(&render_table(&header, &table));
            human.push('\n');
        }
    }
    write_csv(
        &cfg.out_path("simulate.csv"),
        cfg,
        &[
            "n",
            "beta2",
            "arm",
            "method",
            "n_outcomes",
            "coefficient",
            "truth",
            "bias",
            "mcsd",
            "se",
            "median_se",
            "cp",
            "re",
            "rejection_rate",
            "successes",
            "failures",
            "flagged",
        ],
        &machine,
    )?;
    write_text(&cfg.out_path("simulate.txt"), cfg, &human)?;
    print!("{human}");
    Ok(0)
}

pub fn cmd_power(cfg: &RunConfig) -> Result<i32> {
    if cfg.n.len() != 1 {
        return Err(PepsiError::Validation("power takes a single --n".into()));
    }
    cfg.ensure_out_dir()?;
    let results = run_for_each_n(cfg)?;
    let coef = COEFFICIENT_NAMES[cfg.coef];
    let (plan, rows) = &results[0];
    let selected: Vec<&MetricRow> = rows.iter().filter(|r| r.coefficient == coef).collect();
    let machine: Vec<Vec<String>> = selected
        .iter()
        .map(|r| vec![sig6(r.beta2), r.arm.clone(), sig6(r.rejection_rate)])
        .collect();
    write_csv(
        &cfg.out_path("power.csv"),
        cfg,
        &["beta2", "method", "rejection_rate"],
        &machine,
    )?;

    let mut table = Vec::new();
    for &b2 in &plan.beta2 {
        let mut row = vec![sig6(b2)];
        for arm in &plan.arms {
            let r = selected
                .iter()
                .find(|r| r.beta2 == b2 && r.arm == arm.label);
            row.push(
                r.map(|r| format!("{:.1}", 100.0 * r.rejection_rate))
                    .unwrap_or_default(),
            );
        }
        table.push(row);
    }
    let mut header = vec!["beta2".to_string()];
    header.extend(plan.arms.iter().map(|a| a.label.clone()));
    let human = format!(
        "Wald rejection rate (%) for H0: {coef} = 0, {} n = {} reps = {}\n{}",
        plan.case,
        plan.n,
        plan.reps,
        render_table(&header, &table)
    );
    write_text(&cfg.out_path("power.txt"), cfg, &human)?;
    print!("{human}");

    if let Some(svg) = &cfg.svg {
        let series: Vec<Series> = plan
            .arms
            .iter()
            .map(|a| Series {
                label: a.label.clone(),
                points: selected
                    .iter()
                    .filter(|r| r.arm == a.label)
                    .map(|r| (r.beta2, r.rejection_rate))
                    .collect(),
            })
            .collect();
        let chart = svg_line_chart(
            &format!("Power, n = {}", plan.n),
            coef,
            "rejection rate",
            &series,
        );
        write_svg(svg, &chart)?;
    }
    Ok(0)
}

pub fn cmd_curves(cfg: &RunConfig) -> Result<i32> {
    cfg.ensure_out_dir()?;
    let results = run_for_each_n(cfg)?;
    let coef = COEFFICIENT_NAMES[cfg.coef];
    let b2 = cfg.beta2[0];
    let mut machine = Vec::new();
    let mut table = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    for (_, rows) in &results {
        for r in rows
            .iter()
            .filter(|r| r.coefficient == coef && r.beta2 == b2)
        {
            machine.push(vec![
                r.n.to_string(),
                r.n_outcomes.to_string(),
                r.method.to_string(),
                r.coefficient.clone(),
                opt6(r.re),
                sig6(r.cp),
            ]);
            table.push(vec![
                r.n.to_string(),
                r.n_outcomes.to_string(),
                r.method.to_string(),
                r.re.map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "-".into()),
                format!("{:.1}", 100.0 * r.cp),
            ]);
            if r.method != Method::Naive {
                let label = format!("{} M={}", r.method, r.n_outcomes);
                let point = (r.n as f64, r.re.unwrap_or(f64::NAN));
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.points.push(point),
                    None => series.push(Series {
                        label,
                        points: vec![point],
                    }),
                }
            }
        }
    }
    write_csv(
        &cfg.out_path("curves.csv"),
        cfg,
        &["n", "M", "method", "coefficient", "RE", "CP"],
        &machine,
    )?;
    let header: Vec<String> = ["n", "M", "method", "RE", "CP"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let human = format!(
        "Relative efficiency and coverage (%) for {coef}, {} reps = {}\n{}",
        cfg.case,
        cfg.reps,
        render_table(&header, &table)
    );
    write_text(&cfg.out_path("curves.txt"), cfg, &human)?;
    print!("{human}");
    if let Some(svg) = &cfg.svg {
        let chart = svg_line_chart(
            &format!("Relative efficiency of {coef}"),
            "n",
            "RE",
            &series,
        );
        write_svg(svg, &chart)?;
    }
    Ok(0)
}

fn write_svg(path: &Path, chart: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(chart.as_bytes())?;
    Ok(())
}

pub fn dispatch(cfg: &RunConfig) -> Result<i32> {
    match cfg.mode {
        Mode::Fit => cmd_fit(cfg),
        Mode::Simulate => cmd_simulate(cfg),
        Mode::Power => cmd_power(cfg),
        Mode::Curves => cmd_curves(cfg),
    }
}
