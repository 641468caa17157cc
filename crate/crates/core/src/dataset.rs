//! Observed-data representation: one record per subject holding baseline
//! covariates, assignment `Z`, treatment receipt `S`, observed time
//! `U = min(T, C)` and the event indicator `delta = 1{T <= C}`.
//!
//! Latent failure and censoring times are never stored.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PsceError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    /// Baseline covariates on their original scale (no intercept).
    pub covariates: Vec<f64>,
    pub z: bool,
    pub s: bool,
    pub u: f64,
    pub delta: bool,
}

impl SubjectRecord {
    pub fn zf(&self) -> f64 {
        f64::from(u8::from(self.z))
    }

    pub fn sf(&self) -> f64 {
        f64::from(u8::from(self.s))
    }

    pub fn in_cell(&self, cell: Cell) -> bool {
        self.z == cell.z && self.s == cell.s
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.z, self.s)
    }
}

/// An observed `(Z, S)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub z: bool,
    pub s: bool,
}

impl Cell {
    pub const ALL: [Cell; 4] = [
        Cell { z: false, s: false },
        Cell { z: false, s: true },
        Cell { z: true, s: false },
        Cell { z: true, s: true },
    ];

    pub const fn new(z: bool, s: bool) -> Self {
        Cell { z, s }
    }

    /// Position in [`Cell::ALL`].
    pub fn index(self) -> usize {
        usize::from(self.z) * 2 + usize::from(self.s)
    }

    pub fn z_u8(self) -> u8 {
        u8::from(self.z)
    }

    pub fn s_u8(self) -> u8 {
        u8::from(self.s)
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.z_u8(), self.s_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Design {
    Observational,
    /// Assignment is Bernoulli with a known probability.
    Randomized(f64),
}

/// Column mapping used when reading and writing CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    /// Covariate columns; empty means "every column not used below".
    pub covariates: Vec<String>,
    pub z: String,
    pub s: String,
    pub time: String,
    pub event: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            covariates: Vec::new(),
            z: "Z".into(),
            s: "S".into(),
            time: "U".into(),
            event: "delta".into(),
        }
    }
}

/// Immutable validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
    design: Design,
}

impl Dataset {
    pub fn new(
        records: Vec<SubjectRecord>,
        covariate_names: Vec<String>,
        design: Design,
    ) -> Result<Self> {
        if let Design::Randomized(p) = design {
            if !(p > 0.0 && p < 1.0) {
                return Err(PsceError::InvalidArgument(format!(
                    "randomization probability must lie in (0,1), got {p}"
                )));
            }
        }
        let d = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != d {
                return Err(PsceError::DimensionMismatch {
                    expected: d,
                    found: r.covariates.len(),
                });
            }
            if !(r.u > 0.0) || !r.u.is_finite() {
                return Err(PsceError::NonPositiveTime { row: i + 1, value: r.u });
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(PsceError::MissingValue {
                    row: i + 1,
                    column: covariate_names[j].clone(),
                });
            }
        }
        Ok(Dataset {
            records,
            covariate_names,
            design,
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Number of raw covariates.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Width of the design matrix, intercept included.
    pub fn design_dim(&self) -> usize {
        self.covariate_names.len() + 1
    }

    /// Design row `(1, x_cols...)` for subject `i`.
    pub fn design_row(&self, i: usize, cols: &[usize]) -> Vec<f64> {
        let rec = &self.records[i];
        std::iter::once(1.0)
            .chain(cols.iter().map(|&j| rec.covariates[j]))
            .collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Records falling in cell `(z, s)`, order preserved.
    pub fn cell_subset(&self, z: bool, s: bool) -> Result<Dataset> {
        let cell = Cell::new(z, s);
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.in_cell(cell))
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(PsceError::EmptyCell {
                z: cell.z_u8(),
                s: cell.s_u8(),
            });
        }
        Ok(Dataset {
            records,
            covariate_names: self.covariate_names.clone(),
            design: self.design,
        })
    }

    /// Counts of the four cells in [`Cell::ALL`] order.
    pub fn cell_sizes(&self) -> [usize; 4] {
        let mut sizes = [0; 4];
        for r in &self.records {
            sizes[r.cell().index()] += 1;
        }
        sizes
    }

    pub fn require_all_cells(&self) -> Result<()> {
        let sizes = self.cell_sizes();
        for cell in Cell::ALL {
            if sizes[cell.index()] == 0 {
                return Err(PsceError::EmptyCell {
                    z: cell.z_u8(),
                    s: cell.s_u8(),
                });
            }
        }
        Ok(())
    }

    /// Dataset made of the records at `indices` (duplicates allowed).
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            design: self.design,
        }
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PsceError::MissingColumn(name.to_string()))
        };
        let zi = find(&schema.z)?;
        let si = find(&schema.s)?;
        let ti = find(&schema.time)?;
        let ei = find(&schema.event)?;
        let covariate_names: Vec<String> = if schema.covariates.is_empty() {
            headers
                .iter()
                .enumerate()
                .filter(|(i, _)| ![zi, si, ti, ei].contains(i))
                .map(|(_, h)| h.clone())
                .collect()
        } else {
            schema.covariates.clone()
        };
        let cov_idx = covariate_names
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::new();
        for (k, row) in rdr.records().enumerate() {
            let row = row?;
            let line = k + 1;
            let field = |j: usize| row.get(j).unwrap_or("");
            let number = |j: usize| -> Result<f64> {
                let raw = field(j);
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(PsceError::MissingValue {
                        row: line,
                        column: headers[j].clone(),
                    }),
                }
            };
            let flag = |j: usize| -> Result<bool> {
                let raw = field(j);
                if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                    return Err(PsceError::MissingValue {
                        row: line,
                        column: headers[j].clone(),
                    });
                }
                match raw.parse::<f64>() {
                    Ok(v) if v == 0.0 => Ok(false),
                    Ok(v) if v == 1.0 => Ok(true),
                    _ => Err(PsceError::NonBinaryFlag {
                        column: headers[j].clone(),
                        row: line,
                        value: raw.to_string(),
                    }),
                }
            };
            let covariates = cov_idx.iter().map(|&j| number(j)).collect::<Result<Vec<_>>>()?;
            let z = flag(zi)?;
            let s = flag(si)?;
            let u = number(ti)?;
            if u <= 0.0 {
                return Err(PsceError::NonPositiveTime { row: line, value: u });
            }
            let delta = flag(ei)?;
            records.push(SubjectRecord {
                covariates,
                z,
                s,
                u,
                delta,
            });
        }
        Dataset::new(records, covariate_names, Design::Observational)
    }

    /// Writes the dataset with the schema's Z/S/time/event column names.
    /// Values use the shortest round-trip representation.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &ColumnSchema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.extend([
            schema.z.as_str(),
            schema.s.as_str(),
            schema.time.as_str(),
            schema.event.as_str(),
        ]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.covariates.iter().map(|v| v.to_string()).collect();
            row.push(u8::from(r.z).to_string());
            row.push(u8::from(r.s).to_string());
            row.push(r.u.to_string());
            row.push(u8::from(r.delta).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), schema)
    }

    pub fn with_design(mut self, design: Design) -> Result<Dataset> {
        if let Design::Randomized(p) = design {
            if !(p > 0.0 && p < 1.0) {
                return Err(PsceError::InvalidArgument(format!(
                    "randomization probability must lie in (0,1), got {p}"
                )));
            }
        }
        self.design = design;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = "age,Z,S,U,delta\n60,1,1,2.5,1\n55,0,0,1.0,0\n70,1,0,3.0,1\n65,0,1,0.5,1\n";

    fn rec(z: bool, s: bool) -> SubjectRecord {
        SubjectRecord {
            covariates: vec![0.0],
            z,
            s,
            u: 1.0,
            delta: true,
        }
    }

    #[test]
    fn loads_valid_file() {
        let ds = Dataset::read_csv(GOOD.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.design_dim(), 2);
        assert_eq!(ds.covariate_names(), ["age"]);
        assert_eq!(ds.design_row(0, &[0]), vec![1.0, 60.0]);
        assert!(ds.records()[1].z == false && ds.records()[1].delta == false);
    }

    #[test]
    fn rejects_zero_time_with_row() {
        let bad = "age,Z,S,U,delta\n60,1,1,2.5,1\n55,0,0,1.0,0\n70,1,0,0,1\n";
        let err = Dataset::read_csv(bad.as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err, PsceError::NonPositiveTime { row: 3, value: 0.0 });
    }

    #[test]
    fn rejects_missing_column() {
        let bad = "age,Z,S,U\n60,1,1,2.5\n";
        let err = Dataset::read_csv(bad.as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err, PsceError::MissingColumn("delta".into()));
    }

    #[test]
    fn rejects_non_binary_and_missing() {
        let bad = "age,Z,S,U,delta\n60,2,1,2.5,1\n";
        assert!(matches!(
            Dataset::read_csv(bad.as_bytes(), &ColumnSchema::default()),
            Err(PsceError::NonBinaryFlag { row: 1, .. })
        ));
        let bad = "age,Z,S,U,delta\n60,1,1,2.5,1\n,0,1,2.5,1\n";
        assert_eq!(
            Dataset::read_csv(bad.as_bytes(), &ColumnSchema::default()).unwrap_err(),
            PsceError::MissingValue { row: 2, column: "age".into() }
        );
    }

    #[test]
    fn custom_schema() {
        let text = "x1,x2,arm,took,time,event\n1,2,1,0,3,1\n";
        let schema = ColumnSchema {
            covariates: vec!["x2".into()],
            z: "arm".into(),
            s: "took".into(),
            time: "time".into(),
            event: "event".into(),
        };
        let ds = Dataset::read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.records()[0].covariates, vec![2.0]);
        assert!(ds.records()[0].z && !ds.records()[0].s);
    }

    #[test]
    fn cell_subset_filters() {
        let ds = Dataset::new(
            vec![rec(true, true), rec(true, false), rec(false, false)],
            vec!["x".into()],
            Design::Observational,
        )
        .unwrap();
        assert_eq!(ds.cell_subset(true, true).unwrap().n(), 1);
        assert_eq!(
            ds.cell_subset(false, true).unwrap_err(),
            PsceError::EmptyCell { z: 0, s: 1 }
        );
    }

    #[test]
    fn randomized_design_needs_interior_probability() {
        assert!(Dataset::new(vec![], vec![], Design::Randomized(1.0)).is_err());
        assert!(Dataset::new(vec![], vec![], Design::Randomized(0.5)).is_ok());
    }

    proptest! {
        #[test]
        fn cells_partition_the_sample(flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let records: Vec<_> = flags.iter().map(|&(z, s)| rec(z, s)).collect();
            let ds = Dataset::new(records, vec!["x".into()], Design::Observational).unwrap();
            let total: usize = Cell::ALL
                .iter()
                .map(|c| ds.cell_subset(c.z, c.s).map(|d| d.n()).unwrap_or(0))
                .sum();
            prop_assert_eq!(total, ds.n());
        }

        #[test]
        fn csv_round_trip_is_exact(rows in proptest::collection::vec(
            (-1e6f64..1e6, any::<bool>(), any::<bool>(), 1e-9f64..1e4, any::<bool>()), 1..20)) {
            let records: Vec<_> = rows
                .iter()
                .map(|&(x, z, s, u, delta)| SubjectRecord { covariates: vec![x], z, s, u, delta })
                .collect();
            let ds = Dataset::new(records, vec!["x".into()], Design::Observational).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf, &ColumnSchema::default()).unwrap();
            let back = Dataset::read_csv(buf.as_slice(), &ColumnSchema::default()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
