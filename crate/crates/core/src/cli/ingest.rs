//! CSV ingestion with column roles.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{PepsiError, Result};
use crate::model_spec::{PrimaryDataset, SecondaryDataset};

/// Column roles. Covariate entries of the form `a:b` request the product of
/// columns `a` and `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub primary_outcome: String,
    pub covariates: Vec<String>,
    pub secondary_outcomes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub primary: PrimaryDataset,
    pub secondaries: Vec<SecondaryDataset>,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

impl Roles {
    /// A column may be outcome, covariate or secondary outcome, never two of them.
    pub fn validate(&self) -> Result<()> {
        if self.primary_outcome.trim().is_empty() {
            return Err(PepsiError::Validation(
                "no primary outcome column given".into(),
            ));
        }
        if self.covariates.is_empty() {
            return Err(PepsiError::Validation("no covariate columns given".into()));
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        let mut roles: Vec<(&str, &str)> = vec![(self.primary_outcome.as_str(), "primary outcome")];
        roles.extend(self.covariates.iter().map(|c| (c.as_str(), "covariate")));
        roles.extend(
            self.secondary_outcomes
                .iter()
                .map(|c| (c.as_str(), "secondary outcome")),
        );
        for (col, role) in roles {
            if let Some(prev) = seen.insert(col, role) {
                return Err(PepsiError::Validation(if prev == role {
                    format!("column '{col}' listed twice as {role}")
                } else {
                    format!("column '{col}' cannot be both {prev} and {role}")
                }));
            }
        }
        let outcomes: BTreeSet<&str> = std::iter::once(self.primary_outcome.as_str())
            .chain(self.secondary_outcomes.iter().map(|s| s.as_str()))
            .collect();
        for c in &self.covariates {
            if let Some((a, b)) = split_interaction(c) {
                for part in [a, b] {
                    if outcomes.contains(part) {
                        return Err(PepsiError::Validation(format!(
                            "interaction '{c}' uses outcome column '{part}'"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw columns that must be present and non-missing.
    fn required_columns(&self) -> Vec<&str> {
        let mut cols = vec![self.primary_outcome.as_str()];
        for c in &self.covariates {
            match split_interaction(c) {
                Some((a, b)) => {
                    cols.push(a);
                    cols.push(b);
                }
                None => cols.push(c),
            }
        }
        cols.extend(self.secondary_outcomes.iter().map(|s| s.as_str()));
        let mut seen = BTreeSet::new();
        cols.retain(|c| seen.insert(*c));
        cols
    }
}

fn split_interaction(name: &str) -> Option<(&str, &str)> {
    let (a, b) = name.split_once(':')?;
    Some((a.trim(), b.trim()))
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim(),
        "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL"
    )
}

pub fn ingest_csv(path: &Path, roles: &Roles) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| {
        PepsiError::Validation(format!("cannot open data file {}: {e}", path.display()))
    })?;
    ingest_reader(file, roles)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, roles: &Roles) -> Result<Ingested> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(PepsiError::Validation("data file has no header row".into()));
    }
    let required = roles.required_columns();
    let mut positions = HashMap::new();
    for col in &required {
        match headers.iter().position(|h| h == col) {
            Some(i) => {
                positions.insert(*col, i);
            }
            None => {
                return Err(PepsiError::Validation(format!(
                    "unknown column '{col}'; available columns: {}",
                    headers.join(", ")
                )))
            }
        }
    }

    let mut values: HashMap<&str, Vec<f64>> = required.iter().map(|c| (*c, Vec::new())).collect();
    let mut rows_read = 0;
    let mut rows_dropped = 0;
    for record in rdr.records() {
        let record = record?;
        rows_read += 1;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(rows_read as u64 + 1);
        let mut row = Vec::with_capacity(required.len());
        let mut missing = false;
        for col in &required {
            let cell = record.get(positions[col]).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| {
                PepsiError::Validation(format!(
                    "non-numeric value '{cell}' in column '{col}' at line {line}"
                ))
            })?;
            if !v.is_finite() {
                return Err(PepsiError::Validation(format!(
                    "non-finite value '{cell}' in column '{col}' at line {line}"
                )));
            }
            row.push(v);
        }
        if missing {
            rows_dropped += 1;
            continue;
        }
        for (col, v) in required.iter().zip(row) {
            values.get_mut(col).expect("column registered").push(v);
        }
    }
    let n = rows_read - rows_dropped;
    if n == 0 {
        return Err(PepsiError::Validation(format!(
            "no usable rows ({rows_read} read, {rows_dropped} dropped for missing values)"
        )));
    }

    let column = |name: &str| -> DVector<f64> { DVector::from_vec(values[name].clone()) };
    let mut x = DMatrix::zeros(n, roles.covariates.len());
    for (k, c) in roles.covariates.iter().enumerate() {
        let col = match split_interaction(c) {
            Some((a, b)) => column(a).component_mul(&column(b)),
            None => column(c),
        };
        x.set_column(k, &col);
    }
    let primary = PrimaryDataset::with_names(
        column(&roles.primary_outcome),
        x.clone(),
        roles.covariates.clone(),
    )?;
    let secondaries = roles
        .secondary_outcomes
        .iter()
        .enumerate()
        .map(|(i, name)| SecondaryDataset::with_name(i + 1, name.clone(), column(name), x.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ingested {
        primary,
        secondaries,
        rows_read,
        rows_dropped,
    })
}
