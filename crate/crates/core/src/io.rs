//! File formats: country-labelled CSV matrices, observed-data bundles,
//! world JSON and result tables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use shiftsim_estimators::Dataset;

use crate::calibrate::ObservedData;
use crate::country::CountrySet;
use crate::equilibrium::Equilibrium;
use crate::error::{ModelError, Result};
use crate::scenarios::ReformResult;
use crate::triangulation::ConduitCorrection;
use crate::world::{validate_world, WorldCalibration};

/// Matrix with row and column labels as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: DMatrix<f64>,
}

fn parse_cell(s: &str) -> Result<f64> {
    let t = s.trim();
    match t.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "nan" | "na" | "" => Ok(f64::NAN),
        _ => t.parse::<f64>().map_err(|_| ModelError::Input(format!("not a number: {t:?}"))),
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Header row `code,<col labels>`, then one `label,<values>` row each.
/// `inf` and `NA` are accepted.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<LabeledMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let cols: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    if cols.is_empty() {
        return Err(ModelError::Input("matrix has no columns".into()));
    }
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != cols.len() + 1 {
            return Err(ModelError::Input(format!("row {} has {} cells, expected {}", rows.len() + 1, rec.len(), cols.len() + 1)));
        }
        rows.push(rec[0].to_string());
        for c in rec.iter().skip(1) {
            data.push(parse_cell(c)?);
        }
    }
    let values = DMatrix::from_row_slice(rows.len(), cols.len(), &data);
    Ok(LabeledMatrix { rows, cols, values })
}

pub fn write_matrix_csv<W: Write>(writer: W, rows: &[String], cols: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once("code".to_string()).chain(cols.iter().cloned()))?;
    for (r, label) in rows.iter().enumerate() {
        w.write_record(std::iter::once(label.clone()).chain((0..m.ncols()).map(|c| fmt_cell(m[(r, c)]))))?;
    }
    w.flush()?;
    Ok(())
}

impl LabeledMatrix {
    /// Reorders rows and columns to the given label lists.
    pub fn align(&self, rows: &[String], cols: &[String]) -> Result<DMatrix<f64>> {
        let find = |have: &[String], want: &str, what: &str| {
            have.iter()
                .position(|x| x == want)
                .ok_or_else(|| ModelError::Input(format!("{what} {want:?} missing from matrix")))
        };
        if self.rows.len() != rows.len() || self.cols.len() != cols.len() {
            return Err(ModelError::Dimension(format!(
                "matrix is {}x{}, expected {}x{}",
                self.rows.len(),
                self.cols.len(),
                rows.len(),
                cols.len()
            )));
        }
        let ri: Vec<usize> = rows.iter().map(|r| find(&self.rows, r, "row")).collect::<Result<_>>()?;
        let ci: Vec<usize> = cols.iter().map(|c| find(&self.cols, c, "column")).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.values[(ri[a], ci[b])]))
    }
}

/// One row of `countries.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryRecord {
    pub code: String,
    pub haven: bool,
    pub tax: f64,
    pub wage: f64,
    pub expenditure: f64,
    pub reported_profits: f64,
    #[serde(default)]
    pub tech_covariate: f64,
    /// Havens only.
    #[serde(default)]
    pub haven_index: Option<f64>,
    /// Source-level shifted profits when supplied externally.
    #[serde(default)]
    pub ps_l: Option<f64>,
}

/// Scalars and names kept beside the CSV files of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub sigma: f64,
    pub fdi_covariates: Vec<String>,
    pub haven_terms: Vec<String>,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub numeraire: Option<String>,
}

pub const BUNDLE_META: &str = "meta.json";
pub const BUNDLE_COUNTRIES: &str = "countries.csv";
pub const BUNDLE_TRADE: &str = "trade.csv";
pub const BUNDLE_MP: &str = "mp_sales.csv";
pub const BUNDLE_DISTANCE: &str = "distance.csv";
pub const BUNDLE_FDI: &str = "fdi.csv";
pub const BUNDLE_CONDUIT: &str = "conduit.json";

fn with_path(path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| with_path(path, e))
}

pub fn read_country_table<R: Read>(reader: R) -> Result<Vec<CountryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let recs = rdr.deserialize().collect::<std::result::Result<Vec<CountryRecord>, _>>()?;
    if recs.is_empty() {
        return Err(ModelError::Input("country table is empty".into()));
    }
    Ok(recs)
}

/// Reads a bundle directory. A missing FDI file leaves the panel empty so
/// that the pipeline reports it at the stage that needs it.
pub fn read_observed(dir: &Path) -> Result<ObservedData> {
    let meta: BundleMeta = serde_json::from_reader(open(&dir.join(BUNDLE_META))?)?;
    let recs = read_country_table(open(&dir.join(BUNDLE_COUNTRIES))?)?;
    let labels: Vec<String> = recs.iter().map(|r| r.code.clone()).collect();
    let haven: Vec<bool> = recs.iter().map(|r| r.haven).collect();
    let pick = |code: &Option<String>, fallback: usize| -> Result<usize> {
        match code {
            Some(c) => labels.iter().position(|l| l == c).ok_or_else(|| ModelError::Input(format!("unknown country {c:?}"))),
            None => Ok(fallback),
        }
    };
    let first = haven.iter().position(|h| !h).ok_or_else(|| ModelError::Input("no non-haven country".into()))?;
    let countries = CountrySet::new(labels.clone(), haven.clone(), pick(&meta.reference, first)?, pick(&meta.numeraire, first)?)?;
    let havens: Vec<String> = countries.havens().into_iter().map(|k| labels[k].clone()).collect();
    let square = |name: &str| -> Result<DMatrix<f64>> { read_matrix_csv(open(&dir.join(name))?)?.align(&labels, &labels) };
    let fdi_path = dir.join(BUNDLE_FDI);
    let fdi_panel = if fdi_path.exists() { Dataset::from_csv_path(&fdi_path)? } else { Dataset::new() };
    let conduit_path = dir.join(BUNDLE_CONDUIT);
    let conduit: Option<ConduitCorrection> =
        if conduit_path.exists() { Some(serde_json::from_reader(open(&conduit_path)?)?) } else { None };
    let ps_l = if recs.iter().any(|r| r.ps_l.is_some()) {
        Some(recs.iter().map(|r| r.ps_l.unwrap_or(0.0)).collect())
    } else {
        None
    };
    Ok(ObservedData {
        countries,
        sigma: meta.sigma,
        trade: square(BUNDLE_TRADE)?,
        expenditure: recs.iter().map(|r| r.expenditure).collect(),
        wages: recs.iter().map(|r| r.wage).collect(),
        mp_sales: square(BUNDLE_MP)?,
        reported_profits: recs.iter().map(|r| r.reported_profits).collect(),
        fdi_panel,
        fdi_covariates: meta.fdi_covariates,
        haven_terms: meta.haven_terms,
        ps_l,
        tax_haven: recs.iter().filter(|r| r.haven).map(|r| r.tax).collect(),
        tax_domestic: recs.iter().map(|r| r.tax).collect(),
        distance: square(BUNDLE_DISTANCE)?,
        tech_covariate: recs.iter().map(|r| r.tech_covariate).collect(),
        haven_index: recs.iter().filter(|r| r.haven).map(|r| r.haven_index.unwrap_or(0.0)).collect(),
        conduit,
    })
    .and_then(|o| {
        if havens.is_empty() {
            Err(ModelError::Input("no haven country".into()))
        } else {
            Ok(o)
        }
    })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| with_path(path, e))
}

pub fn write_observed(dir: &Path, obs: &ObservedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    let c = &obs.countries;
    let labels = &c.labels;
    let meta = BundleMeta {
        sigma: obs.sigma,
        fdi_covariates: obs.fdi_covariates.clone(),
        haven_terms: obs.haven_terms.clone(),
        reference: Some(labels[c.reference].clone()),
        numeraire: Some(labels[c.numeraire].clone()),
    };
    write_json(&dir.join(BUNDLE_META), &meta)?;
    let mut w = csv::Writer::from_writer(create(&dir.join(BUNDLE_COUNTRIES))?);
    for k in 0..c.len() {
        w.serialize(CountryRecord {
            code: labels[k].clone(),
            haven: c.is_haven(k),
            tax: obs.tax_domestic[k],
            wage: obs.wages[k],
            expenditure: obs.expenditure[k],
            reported_profits: obs.reported_profits[k],
            tech_covariate: obs.tech_covariate[k],
            haven_index: c.haven_slot(k).map(|j| obs.haven_index[j]),
            ps_l: obs.ps_l.as_ref().map(|v| v[k]),
        })?;
    }
    w.flush()?;
    write_matrix_csv(create(&dir.join(BUNDLE_TRADE))?, labels, labels, &obs.trade)?;
    write_matrix_csv(create(&dir.join(BUNDLE_MP))?, labels, labels, &obs.mp_sales)?;
    write_matrix_csv(create(&dir.join(BUNDLE_DISTANCE))?, labels, labels, &obs.distance)?;
    let fdi = dir.join(BUNDLE_FDI);
    fs::write(&fdi, obs.fdi_panel.to_csv_string()?).map_err(|e| with_path(&fdi, e))?;
    if let Some(cc) = &obs.conduit {
        write_json(&dir.join(BUNDLE_CONDUIT), cc)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<WorldCalibration> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s)?;
    parse_world(&s)
}

/// Parses and validates a world.
pub fn parse_world(text: &str) -> Result<WorldCalibration> {
    let w: WorldCalibration = serde_json::from_str(text)?;
    let violations = validate_world(&w);
    if violations.is_empty() {
        Ok(w)
    } else {
        Err(ModelError::InvalidWorld(violations))
    }
}

/// Per-country deltas of every scenario, long format.
pub fn write_outcomes_csv<W: Write>(writer: W, countries: &CountrySet, results: &[ReformResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario", "mode", "variant", "code", "d_revenue", "d_shifted", "d_production", "d_welfare", "d_wage", "d_firm_mass",
    ])?;
    for r in results {
        let o = &r.outcomes;
        for k in 0..countries.len() {
            w.write_record([
                r.id.clone(),
                mode_name(r),
                r.variant.clone(),
                countries.label(k).to_string(),
                fmt_cell(o.revenue[k]),
                fmt_cell(o.shifted[k]),
                fmt_cell(o.production[k]),
                fmt_cell(o.welfare[k]),
                fmt_cell(o.wages[k]),
                fmt_cell(o.firm_mass[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn mode_name(r: &ReformResult) -> String {
    serde_json::to_value(r.mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// One row per scenario and mode for one country: revenue, shifting,
/// production and welfare changes.
pub fn write_summary_csv<W: Write>(writer: W, country: usize, results: &[ReformResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["panel", "scenario", "d_revenue", "d_shifted", "d_production", "d_welfare", "residual"])?;
    for r in results {
        let o = &r.outcomes;
        w.write_record([
            mode_name(r),
            r.id.clone(),
            fmt_cell(o.revenue[country]),
            fmt_cell(o.shifted[country]),
            fmt_cell(o.production[country]),
            fmt_cell(o.welfare[country]),
            fmt_cell(r.residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Revenue decomposition rows; `ps_effect` and `real_effect` are shares
/// of the partial effect unless `pe_zero` is set.
pub fn write_revenue_decomposition_csv<W: Write>(writer: W, countries: &CountrySet, results: &[ReformResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "mode", "code", "pe_pct", "ge_pct", "ps_effect", "real_effect", "pe_zero"])?;
    for r in results {
        for (k, d) in r.revenue.iter().enumerate() {
            w.write_record([
                r.id.clone(),
                mode_name(r),
                countries.label(k).to_string(),
                fmt_cell(d.pe_pct),
                fmt_cell(d.ge_pct),
                fmt_cell(d.ps_effect),
                fmt_cell(d.real_effect),
                d.pe_zero.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_welfare_decomposition_csv<W: Write>(writer: W, countries: &CountrySet, results: &[ReformResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario", "mode", "code", "w_pe", "w_ge", "wage_pe", "wage_ge", "c_wage", "c_revenue", "c_rent", "c_wedge", "c_price",
    ])?;
    for r in results {
        for (k, d) in r.welfare.iter().enumerate() {
            w.write_record([
                r.id.clone(),
                mode_name(r),
                countries.label(k).to_string(),
                fmt_cell(d.w_pe),
                fmt_cell(d.w_ge),
                fmt_cell(d.wage_pe),
                fmt_cell(d.wage_ge),
                fmt_cell(d.contrib_wage),
                fmt_cell(d.contrib_revenue),
                fmt_cell(d.contrib_rent),
                fmt_cell(d.contrib_wedge),
                fmt_cell(d.contrib_price),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    pub value: f64,
}

/// Shifted-profit flows residence → haven and source → haven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sankey {
    pub residence_to_haven: Vec<SankeyLink>,
    pub source_to_haven: Vec<SankeyLink>,
}

pub fn sankey(countries: &CountrySet, eq: &Equilibrium) -> Sankey {
    let havens = countries.havens();
    let links = |m: DMatrix<f64>| {
        let mut out = Vec::new();
        for r in 0..m.nrows() {
            for (j, &h) in havens.iter().enumerate() {
                if m[(r, j)] > 0.0 {
                    out.push(SankeyLink {
                        source: countries.label(r).to_string(),
                        target: countries.label(h).to_string(),
                        value: m[(r, j)],
                    });
                }
            }
        }
        out
    };
    Sankey {
        residence_to_haven: links(eq.shifted_by_residence_haven()),
        source_to_haven: links(eq.shifted_by_source_haven()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_aligns_to_requested_order() {
        let text = "code,B,A\nA,1,inf\nB,NA,4\n";
        let m = read_matrix_csv(text.as_bytes()).unwrap();
        let ab = ["A".to_string(), "B".to_string()];
        let v = m.align(&ab, &ab).unwrap();
        assert_eq!(v[(0, 1)], 1.0);
        assert_eq!(v[(0, 0)], f64::INFINITY);
        assert_eq!(v[(1, 0)], 4.0);
        assert!(v[(1, 1)].is_nan());
    }

    #[test]
    fn ragged_and_unknown_labels_are_rejected() {
        assert!(read_matrix_csv("code,A\nA,1,2\n".as_bytes()).is_err());
        assert!(read_matrix_csv("code,A\nA,x\n".as_bytes()).is_err());
        let m = read_matrix_csv("code,A\nZ,1\n".as_bytes()).unwrap();
        assert!(m.align(&["A".into()], &["A".into()]).is_err());
    }

    #[test]
    fn bundle_survives_disk() {
        let sw = crate::synthetic::generate_world(&crate::synthetic::SyntheticSpec::micro(3)).unwrap();
        let dir = std::env::temp_dir().join(format!("shiftsim-bundle-{}", std::process::id()));
        write_observed(&dir, &sw.observed).unwrap();
        let back = read_observed(&dir).unwrap();
        fs::remove_dir_all(&dir).ok();
        assert_eq!(back.trade, sw.observed.trade);
        assert_eq!(back.mp_sales, sw.observed.mp_sales);
        assert_eq!(back.tax_haven, sw.observed.tax_haven);
        assert_eq!(back.fdi_panel.nrows(), sw.observed.fdi_panel.nrows());
    }
}
