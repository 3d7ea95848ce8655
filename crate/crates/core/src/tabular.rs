//! Column-oriented datasets with role annotations and an explicit
//! missingness mask.
//!
//! Values behind a masked entry are stored as `0.0` and must never be read as
//! data. The only sentinel understood on input is `NaN` (in memory) or an
//! empty field / `NA` (in CSV).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("length mismatch: column `{column}` has {found} rows, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate singleton role {role:?}: `{first}` and `{second}`")]
    DuplicateRole {
        role: ColumnRole,
        first: String,
        second: String,
    },
    #[error("non-binary indicator: column `{column}` row {row} holds {value}")]
    NonBinaryIndicator {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("column `{0}` has no role assigned")]
    MissingRole(String),
    #[error("role map names column `{0}` which does not exist")]
    RoleForUnknownColumn(String),
    #[error("dataset has no {0:?} column")]
    MissingRequiredRole(ColumnRole),
    #[error("column `{0}` already exists")]
    DuplicateColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("covariate mismatch: trial-only {trial_only:?}, target-only {target_only:?}")]
    CovariateMismatch {
        trial_only: Vec<String>,
        target_only: Vec<String>,
    },
    #[error("derived column `{column}` disagrees with its recipe at row {row}")]
    DerivedMismatch { column: String, row: usize },
    #[error("cannot parse `{value}` in column `{column}` (data row {row})")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnRole {
    Covariate,
    TrialIndicator,
    Treatment,
    Outcome,
    Weight,
    Derived,
}

impl ColumnRole {
    fn is_singleton(self) -> bool {
        matches!(
            self,
            ColumnRole::TrialIndicator
                | ColumnRole::Treatment
                | ColumnRole::Outcome
                | ColumnRole::Weight
        )
    }

    fn is_binary(self) -> bool {
        matches!(self, ColumnRole::TrialIndicator | ColumnRole::Treatment)
    }
}

impl std::str::FromStr for ColumnRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "covariate" => Ok(ColumnRole::Covariate),
            "trialindicator" | "trial_indicator" | "trial" => Ok(ColumnRole::TrialIndicator),
            "treatment" => Ok(ColumnRole::Treatment),
            "outcome" => Ok(ColumnRole::Outcome),
            "weight" => Ok(ColumnRole::Weight),
            "derived" => Ok(ColumnRole::Derived),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// Product recipe of a derived column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
    values: Vec<f64>,
    observed: Vec<bool>,
    pub recipe: Option<Recipe>,
}

impl Column {
    /// Builds a column from raw values where `NaN` marks a missing entry.
    pub fn from_raw(name: impl Into<String>, role: ColumnRole, raw: &[f64]) -> Self {
        let observed: Vec<bool> = raw.iter().map(|v| !v.is_nan()).collect();
        let values = raw
            .iter()
            .map(|&v| if v.is_nan() { 0.0 } else { v })
            .collect();
        Column {
            name: name.into(),
            role,
            values,
            observed,
            recipe: None,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<f64> {
        self.observed[row].then(|| self.values[row])
    }

    pub fn n_missing(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn fully_observed(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// True when every observed entry is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values
            .iter()
            .zip(&self.observed)
            .all(|(&v, &o)| !o || v == 0.0 || v == 1.0)
    }

    fn check_binary(&self) -> Result<(), TableError> {
        for (row, (&v, &o)) in self.values.iter().zip(&self.observed).enumerate() {
            if o && v != 0.0 && v != 1.0 {
                return Err(TableError::NonBinaryIndicator {
                    column: self.name.clone(),
                    row,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// How `concat_trial_target` treats covariates present in only one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConcatMode {
    #[default]
    Strict,
    /// Absent covariates are added as fully missing columns.
    Permissive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    columns: Vec<Column>,
}

impl Dataset {
    /// Assembles a dataset from prepared columns, checking every invariant.
    pub fn from_columns(columns: Vec<Column>) -> Result<Self, TableError> {
        let n_rows = columns.first().map_or(0, Column::len);
        let mut singletons: HashMap<ColumnRole, &str> = HashMap::new();
        for (i, col) in columns.iter().enumerate() {
            if col.len() != n_rows || col.observed.len() != n_rows {
                return Err(TableError::LengthMismatch {
                    column: col.name.clone(),
                    expected: n_rows,
                    found: col.len(),
                });
            }
            if columns[..i].iter().any(|c| c.name == col.name) {
                return Err(TableError::DuplicateColumn(col.name.clone()));
            }
            if col.role.is_singleton() {
                if let Some(first) = singletons.insert(col.role, &col.name) {
                    return Err(TableError::DuplicateRole {
                        role: col.role,
                        first: first.to_string(),
                        second: col.name.clone(),
                    });
                }
            }
            if col.role.is_binary() {
                col.check_binary()?;
            }
        }
        Ok(Dataset { n_rows, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn try_column(&self, name: &str) -> Result<&Column, TableError> {
        self.column(name)
            .ok_or_else(|| TableError::UnknownColumn(name.to_string()))
    }

    fn column_index(&self, name: &str) -> Result<usize, TableError> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| TableError::UnknownColumn(name.to_string()))
    }

    pub fn role_column(&self, role: ColumnRole) -> Option<&Column> {
        self.columns.iter().find(|c| c.role == role)
    }

    pub fn require_role(&self, role: ColumnRole) -> Result<&Column, TableError> {
        self.role_column(role)
            .ok_or(TableError::MissingRequiredRole(role))
    }

    pub fn names_with_role(&self, role: ColumnRole) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.names_with_role(ColumnRole::Covariate)
    }

    /// Trial-membership flags; `None` when the dataset has no indicator.
    pub fn trial_flags(&self) -> Option<Vec<bool>> {
        self.role_column(ColumnRole::TrialIndicator).map(|c| {
            c.values
                .iter()
                .zip(&c.observed)
                .map(|(&v, &o)| o && v == 1.0)
                .collect()
        })
    }

    pub fn total_missing(&self) -> usize {
        self.columns.iter().map(Column::n_missing).sum()
    }

    /// Keeps the given rows, in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                role: c.role,
                values: rows.iter().map(|&r| c.values[r]).collect(),
                observed: rows.iter().map(|&r| c.observed[r]).collect(),
                recipe: c.recipe.clone(),
            })
            .collect();
        Dataset {
            n_rows: rows.len(),
            columns,
        }
    }

    /// Replaces the contents of an existing column. `values` at unobserved
    /// entries are ignored.
    pub fn with_column_data(
        mut self,
        name: &str,
        values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self, TableError> {
        let idx = self.column_index(name)?;
        if values.len() != self.n_rows || observed.len() != self.n_rows {
            return Err(TableError::LengthMismatch {
                column: name.to_string(),
                expected: self.n_rows,
                found: values.len().min(observed.len()),
            });
        }
        let col = &mut self.columns[idx];
        col.values = values
            .into_iter()
            .zip(&observed)
            .map(|(v, &o)| if o { v } else { 0.0 })
            .collect();
        col.observed = observed;
        if col.role.is_binary() {
            col.check_binary()?;
        }
        Ok(self)
    }

    /// Masks the listed rows of a column.
    pub fn mask_rows(mut self, name: &str, rows: &[usize]) -> Result<Self, TableError> {
        let idx = self.column_index(name)?;
        let col = &mut self.columns[idx];
        for &r in rows {
            col.observed[r] = false;
            col.values[r] = 0.0;
        }
        Ok(self)
    }

    pub fn push_column(mut self, column: Column) -> Result<Self, TableError> {
        if self.column(&column.name).is_some() {
            return Err(TableError::DuplicateColumn(column.name));
        }
        self.columns.push(column);
        Dataset::from_columns(self.columns)
    }

    pub fn drop_column(mut self, name: &str) -> Result<Self, TableError> {
        let idx = self.column_index(name)?;
        self.columns.remove(idx);
        Ok(self)
    }

    /// Adds `out = a * b` as a derived column, observed only where both
    /// sources are observed.
    pub fn add_derived_product(self, a: &str, b: &str, out: &str) -> Result<Self, TableError> {
        if self.column(out).is_some() {
            return Err(TableError::DuplicateColumn(out.to_string()));
        }
        let ca = self.try_column(a)?;
        let cb = self.try_column(b)?;
        let observed: Vec<bool> = ca
            .observed
            .iter()
            .zip(&cb.observed)
            .map(|(&x, &y)| x && y)
            .collect();
        let values = ca
            .values
            .iter()
            .zip(&cb.values)
            .zip(&observed)
            .map(|((&x, &y), &o)| if o { x * y } else { 0.0 })
            .collect();
        let column = Column {
            name: out.to_string(),
            role: ColumnRole::Derived,
            values,
            observed,
            recipe: Some(Recipe {
                a: a.to_string(),
                b: b.to_string(),
            }),
        };
        self.push_column(column)
    }

    /// Verifies every derived column equals the product of its sources on
    /// rows where all three are observed.
    pub fn check_derived(&self) -> Result<(), TableError> {
        for col in &self.columns {
            let Some(recipe) = &col.recipe else { continue };
            let a = self.try_column(&recipe.a)?;
            let b = self.try_column(&recipe.b)?;
            for row in 0..self.n_rows {
                if col.observed[row] && a.observed[row] && b.observed[row] {
                    let expect = a.values[row] * b.values[row];
                    if col.values[row] != expect {
                        return Err(TableError::DerivedMismatch {
                            column: col.name.clone(),
                            row,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a CSV with a header row. Empty fields and `NA` are missing.
    /// Columns absent from `roles` are rejected.
    pub fn read_csv<R: Read>(
        reader: R,
        roles: &HashMap<String, ColumnRole>,
    ) -> Result<Self, TableError> {
        build_dataset(read_raw_csv(reader)?, roles)
    }

    pub fn read_csv_path(
        path: impl AsRef<Path>,
        roles: &HashMap<String, ColumnRole>,
    ) -> Result<Self, TableError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), roles)
    }

    /// Writes all columns; masked entries are written as `NA`. Values use the
    /// shortest round-trip float representation.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TableError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.names())?;
        let mut record: Vec<String> = Vec::with_capacity(self.columns.len());
        for row in 0..self.n_rows {
            record.clear();
            for col in &self.columns {
                record.push(match col.get(row) {
                    Some(v) => format!("{v:?}"),
                    None => "NA".to_string(),
                });
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Role map of this dataset, suitable for re-reading an exported CSV.
    pub fn roles(&self) -> HashMap<String, ColumnRole> {
        self.columns
            .iter()
            .map(|c| (c.name.clone(), c.role))
            .collect()
    }
}

/// Reads a headed numeric CSV into named raw columns. Empty fields and `NA`
/// become `NaN`.
pub fn read_raw_csv<R: Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>, TableError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            let v = if field.is_empty() || field == "NA" {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|_| TableError::Parse {
                    column: headers[j].clone(),
                    row,
                    value: field.to_string(),
                })?
            };
            raw[j].push(v);
        }
    }
    Ok(headers.into_iter().zip(raw).collect())
}

/// Builds a dataset from named raw columns (`NaN` = missing) and a role map
/// covering every column.
pub fn build_dataset(
    columns: Vec<(String, Vec<f64>)>,
    roles: &HashMap<String, ColumnRole>,
) -> Result<Dataset, TableError> {
    for name in roles.keys() {
        if !columns.iter().any(|(n, _)| n == name) {
            return Err(TableError::RoleForUnknownColumn(name.clone()));
        }
    }
    let cols = columns
        .into_iter()
        .map(|(name, raw)| {
            let role = *roles
                .get(&name)
                .ok_or_else(|| TableError::MissingRole(name.clone()))?;
            Ok(Column::from_raw(name, role, &raw))
        })
        .collect::<Result<Vec<_>, TableError>>()?;
    Dataset::from_columns(cols)
}

/// Stacks a trial sample on top of a target sample and adds a trial
/// indicator (1 for trial rows, 0 for target rows). Treatment and outcome on
/// target rows are kept as masked entries; both may be absent altogether.
pub fn concat_trial_target(
    trial: &Dataset,
    target: &Dataset,
    mode: ConcatMode,
) -> Result<Dataset, TableError> {
    let trial_cov = trial.covariate_names();
    let target_cov = target.covariate_names();
    let trial_only: Vec<String> = trial_cov
        .iter()
        .filter(|c| !target_cov.contains(c))
        .cloned()
        .collect();
    let target_only: Vec<String> = target_cov
        .iter()
        .filter(|c| !trial_cov.contains(c))
        .cloned()
        .collect();
    if mode == ConcatMode::Strict && !(trial_only.is_empty() && target_only.is_empty()) {
        return Err(TableError::CovariateMismatch {
            trial_only,
            target_only,
        });
    }

    let n1 = trial.n_rows();
    let n0 = target.n_rows();
    let n = n1 + n0;
    let stack = |name: &str, role: ColumnRole| -> Column {
        let mut values = Vec::with_capacity(n);
        let mut observed = Vec::with_capacity(n);
        for part in [trial, target] {
            match part.column(name) {
                Some(c) => {
                    values.extend_from_slice(&c.values);
                    observed.extend_from_slice(&c.observed);
                }
                None => {
                    values.extend(std::iter::repeat_n(0.0, part.n_rows()));
                    observed.extend(std::iter::repeat_n(false, part.n_rows()));
                }
            }
        }
        Column {
            name: name.to_string(),
            role,
            values,
            observed,
            recipe: None,
        }
    };

    let mut columns = Vec::new();
    let mut cov_order = trial_cov.clone();
    cov_order.extend(target_only);
    for name in &cov_order {
        columns.push(stack(name, ColumnRole::Covariate));
    }

    let s_name = trial
        .role_column(ColumnRole::TrialIndicator)
        .map_or("S".to_string(), |c| c.name.clone());
    let mut s_raw = vec![1.0; n1];
    s_raw.extend(std::iter::repeat_n(0.0, n0));
    columns.push(Column::from_raw(s_name, ColumnRole::TrialIndicator, &s_raw));

    for role in [ColumnRole::Treatment, ColumnRole::Outcome] {
        // Absent from the trial means covariate-only data (diagnostics).
        let Some(tcol) = trial.role_column(role) else {
            if target.role_column(role).is_some() {
                return Err(TableError::MissingRequiredRole(role));
            }
            continue;
        };
        let name = tcol.name.clone();
        let mut col = stack(&name, role);
        if let Some(tc) = target.role_column(role) {
            if tc.name != name {
                return Err(TableError::MissingRequiredRole(role));
            }
        }
        // Target rows never carry treatment or outcome information.
        for r in n1..n {
            col.observed[r] = false;
            col.values[r] = 0.0;
        }
        columns.push(col);
    }
    Dataset::from_columns(columns)
}
