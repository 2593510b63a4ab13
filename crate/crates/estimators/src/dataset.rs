//! Columnar datasets with numeric and categorical columns.
//!
//! CSV headers may carry a type suffix: `name:num` or `name:cat`. Untyped
//! columns are numeric when every cell parses as a float, categorical
//! otherwise.

use std::collections::HashMap;
use std::io::Read;

use serde::Serialize;

use crate::error::{EstimationError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical { codes: Vec<usize>, levels: Vec<String> },
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ColumnData::Numeric(_) => "numeric",
            ColumnData::Categorical { .. } => "categorical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Dataset {
    rows: usize,
    columns: Vec<Column>,
}

/// Encode string labels as dense codes, levels in order of first appearance.
pub fn encode_levels<S: AsRef<str>>(values: &[S]) -> (Vec<usize>, Vec<String>) {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut levels = Vec::new();
    let codes = values
        .iter()
        .map(|v| {
            let v = v.as_ref();
            *index.entry(v).or_insert_with(|| {
                levels.push(v.to_string());
                levels.len() - 1
            })
        })
        .collect();
    (codes, levels)
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    fn push(&mut self, column: Column) -> Result<()> {
        if self.has(&column.name) {
            return Err(EstimationError::DuplicateColumn(column.name));
        }
        let len = column.data.len();
        if self.columns.is_empty() {
            self.rows = len;
        } else if len != self.rows {
            return Err(EstimationError::RaggedColumn {
                name: column.name,
                len,
                rows: self.rows,
            });
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn add_numeric(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.push(Column {
            name: name.to_string(),
            data: ColumnData::Numeric(values),
        })
    }

    pub fn add_categorical<S: AsRef<str>>(&mut self, name: &str, values: &[S]) -> Result<()> {
        let (codes, levels) = encode_levels(values);
        self.push(Column {
            name: name.to_string(),
            data: ColumnData::Categorical { codes, levels },
        })
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.add_numeric(name, values)?;
        Ok(self)
    }

    pub fn with_categorical<S: AsRef<str>>(mut self, name: &str, values: &[S]) -> Result<Self> {
        self.add_categorical(name, values)?;
        Ok(self)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| EstimationError::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match &self.column(name)?.data {
            ColumnData::Numeric(v) => Ok(v),
            other => Err(EstimationError::ColumnType {
                name: name.to_string(),
                expected: "numeric",
                found: other.kind(),
            }),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<(&[usize], &[String])> {
        match &self.column(name)?.data {
            ColumnData::Categorical { codes, levels } => Ok((codes, levels)),
            other => Err(EstimationError::ColumnType {
                name: name.to_string(),
                expected: "categorical",
                found: other.kind(),
            }),
        }
    }

    /// Label of row `row` in a categorical column.
    pub fn label(&self, name: &str, row: usize) -> Result<&str> {
        let (codes, levels) = self.categorical(name)?;
        Ok(&levels[codes[row]])
    }

    /// Keep only rows where `keep` is true.
    pub fn filter(&self, keep: &[bool]) -> Dataset {
        let rows = keep.iter().filter(|k| **k).count();
        let columns = self
            .columns
            .iter()
            .map(|c| {
                let data = match &c.data {
                    ColumnData::Numeric(v) => ColumnData::Numeric(
                        v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect(),
                    ),
                    ColumnData::Categorical { codes, levels } => {
                        let labels: Vec<&str> = codes
                            .iter()
                            .zip(keep)
                            .filter(|(_, k)| **k)
                            .map(|(c, _)| levels[*c].as_str())
                            .collect();
                        let (codes, levels) = encode_levels(&labels);
                        ColumnData::Categorical { codes, levels }
                    }
                };
                Column { name: c.name.clone(), data }
            })
            .collect();
        Dataset { rows, columns }
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(EstimationError::Malformed("empty header".into()));
        }
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(EstimationError::Malformed(format!(
                    "record has {} fields, header has {}",
                    record.len(),
                    headers.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                cells[j].push(field.to_string());
            }
        }
        let mut ds = Dataset::new();
        for (header, values) in headers.iter().zip(cells) {
            let (name, kind) = match header.rsplit_once(':') {
                Some((n, k)) if k == "num" || k == "cat" => (n, Some(k)),
                _ => (header.as_str(), None),
            };
            if name.is_empty() {
                return Err(EstimationError::Malformed("empty column name".into()));
            }
            let parsed: Option<Vec<f64>> = match kind {
                Some("cat") => None,
                _ => values.iter().map(|v| v.parse::<f64>().ok()).collect(),
            };
            match (kind, parsed) {
                (_, Some(nums)) => ds.add_numeric(name, nums)?,
                (Some("num"), None) => {
                    return Err(EstimationError::Malformed(format!(
                        "column `{name}` declared numeric but has non-numeric cells"
                    )))
                }
                (_, None) => ds.add_categorical(name, &values)?,
            }
        }
        if ds.columns.is_empty() {
            ds.rows = 0;
        }
        Ok(ds)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_csv_reader(text.as_bytes())
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| EstimationError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    /// Serialize with typed headers so a round trip preserves column kinds.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| match c.data {
                ColumnData::Numeric(_) => format!("{}:num", c.name),
                ColumnData::Categorical { .. } => format!("{}:cat", c.name),
            })
            .collect();
        wtr.write_record(&header)?;
        for r in 0..self.rows {
            let row: Vec<String> = self
                .columns
                .iter()
                .map(|c| match &c.data {
                    ColumnData::Numeric(v) => format!("{:?}", v[r]),
                    ColumnData::Categorical { codes, levels } => levels[codes[r]].clone(),
                })
                .collect();
            wtr.write_record(&row)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| EstimationError::Malformed(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EstimationError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_and_inferred_headers() {
        let ds = Dataset::from_csv_str("y:num,g:cat,x,z\n1,a,2.5,p\n3,b,4,q\n").unwrap();
        assert_eq!(ds.nrows(), 2);
        assert_eq!(ds.numeric("y").unwrap(), &[1.0, 3.0]);
        assert_eq!(ds.numeric("x").unwrap(), &[2.5, 4.0]);
        assert_eq!(ds.label("g", 1).unwrap(), "b");
        assert!(ds.categorical("z").is_ok());
    }

    #[test]
    fn numeric_declared_column_rejects_text() {
        assert!(Dataset::from_csv_str("y:num\nabc\n").is_err());
    }

    #[test]
    fn categorical_codes_follow_first_appearance() {
        let ds = Dataset::new().with_categorical("g", &["b", "a", "b"]).unwrap();
        let (codes, levels) = ds.categorical("g").unwrap();
        assert_eq!(codes, &[0, 1, 0]);
        assert_eq!(levels, &["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn ragged_columns_rejected() {
        let ds = Dataset::new().with_numeric("a", vec![1.0, 2.0]).unwrap();
        assert!(ds.with_numeric("b", vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_keeps_kinds() {
        let ds = Dataset::new()
            .with_numeric("y", vec![0.1, 2.0])
            .unwrap()
            .with_categorical("g", &["1", "2"])
            .unwrap();
        let back = Dataset::from_csv_str(&ds.to_csv_string().unwrap()).unwrap();
        assert_eq!(ds, back);
    }
}
