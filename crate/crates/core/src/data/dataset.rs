use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::HeadTargets;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ColumnKind {
    /// 0-based integer labels; `classes` inferred from the data when absent.
    Categorical { classes: Option<usize> },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// Covariate columns expected next to the `y0..y{p−1}` response columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self { columns }
    }

    pub fn categorical(name: &str, classes: Option<usize>) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical { classes },
        }
    }

    pub fn continuous(name: &str) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Continuous,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValues {
    Categorical { classes: usize, labels: Vec<usize> },
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: CovariateValues,
}

/// Where a dataset came from; serialized next to generated data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
    pub bayes_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Tensor,
    pub covariates: Vec<Covariate>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(y: Tensor, covariates: Vec<Covariate>, provenance: Provenance) -> Result<Self> {
        let ds = Self {
            y,
            covariates,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.rows();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if !self.y.is_finite() {
            return Err(Error::Data("responses contain non-finite values".into()));
        }
        for c in &self.covariates {
            match &c.values {
                CovariateValues::Categorical { classes, labels } => {
                    if labels.len() != n {
                        return Err(Error::Data(format!("column {} has {} rows", c.name, labels.len())));
                    }
                    if let Some(k) = labels.iter().find(|&&k| k >= *classes) {
                        return Err(Error::Data(format!(
                            "label {k} in column {} out of range for {classes} classes",
                            c.name
                        )));
                    }
                }
                CovariateValues::Continuous(v) => {
                    if v.len() != n {
                        return Err(Error::Data(format!("column {} has {} rows", c.name, v.len())));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Data(format!("column {} has non-finite values", c.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.y.cols()
    }

    pub fn covariate(&self, name: &str) -> Result<&Covariate> {
        self.covariates
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Schema(format!("no covariate column named {name}")))
    }

    /// Labels of a categorical column.
    pub fn labels(&self, name: &str) -> Result<(usize, &[usize])> {
        match &self.covariate(name)?.values {
            CovariateValues::Categorical { classes, labels } => Ok((*classes, labels)),
            CovariateValues::Continuous(_) => Err(Error::Schema(format!("column {name} is not categorical"))),
        }
    }

    /// Targets for a head reading `columns`: one categorical column, or one
    /// or more continuous columns.
    pub fn head_targets(&self, columns: &[String]) -> Result<HeadTargets> {
        let first = columns
            .first()
            .ok_or_else(|| Error::Schema("head names no covariate columns".into()))?;
        match &self.covariate(first)?.values {
            CovariateValues::Categorical { labels, .. } => {
                if columns.len() != 1 {
                    return Err(Error::Schema("a categorical head reads exactly one column".into()));
                }
                Ok(HeadTargets::Classes(labels.clone()))
            }
            CovariateValues::Continuous(_) => {
                let n = self.len();
                let mut t = Tensor::zeros(n, columns.len());
                for (j, name) in columns.iter().enumerate() {
                    match &self.covariate(name)?.values {
                        CovariateValues::Continuous(v) => {
                            for (i, x) in v.iter().enumerate() {
                                t.set(i, j, *x);
                            }
                        }
                        CovariateValues::Categorical { .. } => {
                            return Err(Error::Schema(format!(
                                "column {name} is categorical but the head is continuous"
                            )))
                        }
                    }
                }
                Ok(HeadTargets::Values(t))
            }
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let covariates = self
            .covariates
            .iter()
            .map(|c| Covariate {
                name: c.name.clone(),
                values: match &c.values {
                    CovariateValues::Categorical { classes, labels } => CovariateValues::Categorical {
                        classes: *classes,
                        labels: rows.iter().map(|&i| labels[i]).collect(),
                    },
                    CovariateValues::Continuous(v) => {
                        CovariateValues::Continuous(rows.iter().map(|&i| v[i]).collect())
                    }
                },
            })
            .collect();
        Dataset {
            y: self.y.select_rows(rows),
            covariates,
            provenance: self.provenance.clone(),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema::new(
            self.covariates
                .iter()
                .map(|c| ColumnSpec {
                    name: c.name.clone(),
                    kind: match c.values {
                        CovariateValues::Categorical { classes, .. } => ColumnKind::Categorical {
                            classes: Some(classes),
                        },
                        CovariateValues::Continuous(_) => ColumnKind::Continuous,
                    },
                })
                .collect(),
        )
    }

    /// Headered CSV text; floats use the shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("y{j}")).collect();
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut first = true;
            let mut sep = |out: &mut String| {
                if !first {
                    out.push(',');
                }
                first = false;
            };
            for v in self.y.row_slice(i) {
                sep(&mut out);
                write!(out, "{v:?}").unwrap();
            }
            for c in &self.covariates {
                sep(&mut out);
                match &c.values {
                    CovariateValues::Categorical { labels, .. } => write!(out, "{}", labels[i]).unwrap(),
                    CovariateValues::Continuous(v) => write!(out, "{:?}", v[i]).unwrap(),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_csv()).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Reads a headered CSV with response columns `y0..y{p−1}` and the covariate
/// columns named by `schema`, in any order.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_dataset(&text, path, schema)?;
    ds.provenance.source = path.display().to_string();
    Ok(ds)
}

pub fn parse_dataset(text: &str, path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} is empty", path.display())))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut y_cols = Vec::new();
    let mut cov_cols = vec![None; schema.columns.len()];
    for (idx, name) in names.iter().enumerate() {
        if let Some(j) = name.strip_prefix('y').and_then(|s| s.parse::<usize>().ok()) {
            y_cols.push((j, idx));
        } else if let Some(s) = schema.columns.iter().position(|c| c.name == *name) {
            if cov_cols[s].is_some() {
                return Err(Error::Schema(format!("duplicate column {name}")));
            }
            cov_cols[s] = Some(idx);
        } else {
            return Err(Error::Schema(format!("unexpected column {name:?} not in schema")));
        }
    }
    y_cols.sort_unstable();
    let p = y_cols.len();
    if p == 0 {
        return Err(Error::Schema("no response columns y0..".into()));
    }
    if y_cols.iter().enumerate().any(|(k, &(j, _))| j != k) {
        return Err(Error::Schema("response columns must be exactly y0..y{p-1}".into()));
    }
    let cov_cols: Vec<usize> = cov_cols
        .into_iter()
        .zip(&schema.columns)
        .map(|(c, spec)| c.ok_or_else(|| Error::Schema(format!("missing column {}", spec.name))))
        .collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut raw_cov: Vec<Vec<f64>> = vec![Vec::new(); schema.columns.len()];
    let mut n = 0;
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(parse_error(
                path,
                lineno + 1,
                cells.len().min(names.len()) + 1,
                format!("expected {} fields, found {}", names.len(), cells.len()),
            ));
        }
        let num = |idx: usize| -> Result<f64> {
            let cell = cells[idx];
            if cell.is_empty() {
                return Err(parse_error(path, lineno + 1, idx + 1, "missing value"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(path, lineno + 1, idx + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(path, lineno + 1, idx + 1, "non-finite value"));
            }
            Ok(v)
        };
        for &(_, idx) in &y_cols {
            y.push(num(idx)?);
        }
        for (s, &idx) in cov_cols.iter().enumerate() {
            let v = num(idx)?;
            if let ColumnKind::Categorical { classes } = schema.columns[s].kind {
                if v < 0.0 || v.fract() != 0.0 || classes.is_some_and(|k| v >= k as f64) {
                    return Err(parse_error(
                        path,
                        lineno + 1,
                        idx + 1,
                        format!("invalid class label {v}"),
                    ));
                }
            }
            raw_cov[s].push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{} has a header but no rows", path.display())));
    }
    let covariates = schema
        .columns
        .iter()
        .zip(raw_cov)
        .map(|(spec, vals)| Covariate {
            name: spec.name.clone(),
            values: match spec.kind {
                ColumnKind::Categorical { classes } => {
                    let labels: Vec<usize> = vals.iter().map(|&v| v as usize).collect();
                    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
                    CovariateValues::Categorical { classes: k, labels }
                }
                ColumnKind::Continuous => CovariateValues::Continuous(vals),
            },
        })
        .collect();
    Dataset::new(
        Tensor::matrix(n, p, y),
        covariates,
        Provenance {
            source: path.display().to_string(),
            ..Provenance::default()
        },
    )
}
