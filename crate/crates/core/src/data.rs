//! Observed test-negative data: one row per enrolled, symptomatic, tested
//! participant. The exposure is only carried for phase-two rows, so an
//! estimator holding a [`Dataset`] cannot read a masked exposure.
//!
//! CSV layout is `delta,a,y,<covariates...>` with an empty `a` cell for rows
//! whose exposure was not measured.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Binary,
        }
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Continuous,
        }
    }
}

/// Ordered covariate columns.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<Covariate>,
}

impl Schema {
    pub fn new(covariates: Vec<Covariate>) -> Self {
        Self { covariates }
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.covariates
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.covariates.iter().map(|c| c.name.as_str())
    }
}

/// One participant. `exposure` is `Some` exactly when the exposure was
/// measured (delta = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub exposure: Option<bool>,
    pub y: bool,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn observed(a: bool, y: bool, x: Vec<f64>) -> Self {
        Self {
            exposure: Some(a),
            y,
            x,
        }
    }

    pub fn masked(y: bool, x: Vec<f64>) -> Self {
        Self {
            exposure: None,
            y,
            x,
        }
    }

    #[inline]
    pub fn delta(&self) -> bool {
        self.exposure.is_some()
    }

    #[inline]
    pub fn delta_f64(&self) -> f64 {
        if self.delta() {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn y_f64(&self) -> f64 {
        if self.y {
            1.0
        } else {
            0.0
        }
    }

    /// Exposure as 0/1, zero for masked rows (the δa term).
    #[inline]
    pub fn delta_a(&self) -> f64 {
        match self.exposure {
            Some(true) => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Observation>,
}

impl Dataset {
    /// Builds a dataset, checking that every row has one entry per schema
    /// column. Statistical invariants are checked by [`validate`].
    pub fn new(schema: Schema, rows: Vec<Observation>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} covariates, schema declares {}",
                    i,
                    row.x.len(),
                    schema.len()
                )));
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n_observed(&self) -> usize {
        self.rows.iter().filter(|r| r.delta()).count()
    }

    pub fn observed_rows(&self) -> impl Iterator<Item = (usize, &Observation)> {
        self.rows.iter().enumerate().filter(|(_, r)| r.delta())
    }

    /// Values of one covariate across all rows.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.schema.index_of(name)?;
        Ok(self.rows.iter().map(|r| r.x[j]).collect())
    }

    /// Copy of the dataset restricted to the given row indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Self::new(self.schema.clone(), rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["delta".to_string(), "a".to_string(), "y".to_string()];
        header.extend(self.schema.names().map(str::to_string));
        wtr.write_record(&header).map_err(csv_io)?;
        for row in &self.rows {
            let mut rec = Vec::with_capacity(3 + row.x.len());
            rec.push(if row.delta() { "1" } else { "0" }.to_string());
            rec.push(match row.exposure {
                Some(true) => "1".to_string(),
                Some(false) => "0".to_string(),
                None => String::new(),
            });
            rec.push(if row.y { "1" } else { "0" }.to_string());
            rec.extend(row.x.iter().map(|v| v.to_string()));
            wtr.write_record(&rec).map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

const FIXED_COLUMNS: [&str; 3] = ["delta", "a", "y"];

/// Reads a dataset from a CSV file whose header must be
/// `delta,a,y` followed by the schema's covariate names in order.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(schema.names())
        .collect();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(h, e)| h != e) {
        return Err(Error::Schema(format!(
            "header [{}] does not match expected [{}]",
            header.join(","),
            expected.join(",")
        )));
    }

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, "record", e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(parse_err(
                line,
                "record",
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let delta = parse_flag(&rec[0], line, "delta")?;
        let y = parse_flag(&rec[2], line, "y")?;
        let a_cell = &rec[1];
        let exposure = match (delta, a_cell.is_empty()) {
            (true, false) => Some(parse_flag(a_cell, line, "a")?),
            (false, true) => None,
            (true, true) => {
                return Err(Error::Missingness {
                    line,
                    message: "delta=1 but exposure `a` is missing".into(),
                })
            }
            (false, false) => {
                return Err(Error::Missingness {
                    line,
                    message: format!("delta=0 but exposure `a` is present ({a_cell})"),
                })
            }
        };
        let mut x = Vec::with_capacity(schema.len());
        for (j, cov) in schema.covariates.iter().enumerate() {
            let cell = &rec[3 + j];
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, &cov.name, format!("cannot parse `{cell}` as number")))?;
            x.push(v);
        }
        rows.push(Observation { exposure, y, x });
    }
    Dataset::new(schema.clone(), rows)
}

/// Builds a schema from a CSV header, classifying a covariate as binary when
/// every value is 0 or 1.
pub fn infer_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[..3] != FIXED_COLUMNS {
        return Err(Error::Schema(format!(
            "header must start with delta,a,y; found [{}]",
            header.join(",")
        )));
    }
    let names = &header[3..];
    let mut binary = vec![true; names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i + 2, "record", e.to_string()))?;
        for (j, flag) in binary.iter_mut().enumerate() {
            if let Some(cell) = rec.get(3 + j) {
                if cell != "0" && cell != "1" {
                    *flag = false;
                }
            }
        }
    }
    Ok(Schema::new(
        names
            .iter()
            .zip(binary)
            .map(|(n, b)| Covariate {
                name: n.clone(),
                kind: if b {
                    CovariateKind::Binary
                } else {
                    CovariateKind::Continuous
                },
            })
            .collect(),
    ))
}

fn parse_flag(cell: &str, line: usize, column: &str) -> Result<bool> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(line, column, format!("expected 0 or 1, found `{other}`"))),
    }
}

fn parse_err(line: usize, column: &str, message: String) -> Error {
    Error::Parse {
        line,
        column: column.to_string(),
        message,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Summary of a dataset's (delta, y) cells, covariate ranges and any
/// invariant breaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    /// `counts[delta][y]`
    pub counts: [[usize; 2]; 2],
    pub ranges: Vec<CovariateRange>,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}", self.n)?;
        for delta in 0..2 {
            for y in 0..2 {
                writeln!(f, "delta={delta} y={y}: {}", self.counts[delta][y])?;
            }
        }
        for r in &self.ranges {
            writeln!(f, "{}: [{}, {}]", r.name, r.min, r.max)?;
        }
        if self.failures.is_empty() {
            write!(f, "status: pass")
        } else {
            writeln!(f, "status: FAIL")?;
            for msg in &self.failures {
                writeln!(f, "  - {msg}")?;
            }
            Ok(())
        }
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut counts = [[0usize; 2]; 2];
    let mut failures = Vec::new();
    let schema = ds.schema();
    let mut ranges: Vec<CovariateRange> = schema
        .covariates
        .iter()
        .map(|c| CovariateRange {
            name: c.name.clone(),
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        })
        .collect();

    for (i, row) in ds.rows().iter().enumerate() {
        counts[row.delta() as usize][row.y as usize] += 1;
        for (j, (&v, cov)) in row.x.iter().zip(&schema.covariates).enumerate() {
            if !v.is_finite() {
                failures.push(format!("non-finite value in row {i}, column `{}`", cov.name));
                continue;
            }
            if cov.kind == CovariateKind::Binary && v != 0.0 && v != 1.0 {
                failures.push(format!(
                    "binary column `{}` holds {v} in row {i}",
                    cov.name
                ));
            }
            ranges[j].min = ranges[j].min.min(v);
            ranges[j].max = ranges[j].max.max(v);
        }
    }
    if ds.n() == 0 {
        failures.push("dataset has no rows".into());
    }
    if counts[1][1] == 0 {
        failures.push("no observed-exposure cases (delta=1, y=1)".into());
    }
    if counts[1][0] == 0 {
        failures.push("no observed-exposure noncases (delta=1, y=0)".into());
    }
    ValidationReport {
        n: ds.n(),
        counts,
        ranges,
        failures,
    }
}
