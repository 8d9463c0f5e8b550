//! Shared domain containers: datasets, embeddings, fit results, and their
//! CSV/JSON representations.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::PreprocessStep;
use crate::error::{PiiError, Result};
use crate::linalg;

/// Covariates, outcomes and the declared surrogate control set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    control_idx: Vec<usize>,
    outcome_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        controls: impl IntoIterator<Item = usize>,
        outcome_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, d) = x.shape();
        let p = y.ncols();
        if n < 2 {
            return Err(PiiError::Dimension(format!("need at least 2 rows, got {n}")));
        }
        if d == 0 || p == 0 {
            return Err(PiiError::Dimension(format!("d={d}, p={p}; both must be positive")));
        }
        if y.nrows() != n {
            return Err(PiiError::Dimension(format!(
                "covariates have {n} rows but outcomes have {}",
                y.nrows()
            )));
        }
        check_finite(&x)?;
        check_finite(&y)?;
        let mut seen = BTreeSet::new();
        for c in controls {
            if c >= p {
                return Err(PiiError::UnknownControl(c.to_string()));
            }
            if !seen.insert(c) {
                return Err(PiiError::Invalid(format!("duplicate control index {c}")));
            }
        }
        if seen.len() == p {
            return Err(PiiError::EmptyComplement);
        }
        if let Some(names) = &outcome_names {
            if names.len() != p {
                return Err(PiiError::Dimension(format!(
                    "{} outcome names for {p} outcomes",
                    names.len()
                )));
            }
        }
        Ok(Self {
            x,
            y,
            control_idx: seen.into_iter().collect(),
            outcome_names,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    /// Sorted control indices C.
    pub fn controls(&self) -> &[usize] {
        &self.control_idx
    }

    /// Sorted complement C^c: the outcomes that are tested.
    pub fn tested(&self) -> Vec<usize> {
        let mut ctl = self.control_idx.iter().peekable();
        (0..self.p())
            .filter(|j| {
                if ctl.peek() == Some(&j) {
                    ctl.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn is_control(&self, j: usize) -> bool {
        self.control_idx.binary_search(&j).is_ok()
    }

    pub fn outcome_names(&self) -> Option<&[String]> {
        self.outcome_names.as_deref()
    }

    /// Y restricted to the control columns.
    pub fn y_controls(&self) -> DMatrix<f64> {
        linalg::select_columns(&self.y, &self.control_idx)
    }

    /// Y restricted to the tested columns.
    pub fn y_tested(&self) -> DMatrix<f64> {
        linalg::select_columns(&self.y, &self.tested())
    }

    /// Re-assemble the full outcome matrix from its control and tested blocks.
    pub fn recombine(&self, controls: &DMatrix<f64>, tested: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n(), self.p());
        for (k, &j) in self.control_idx.iter().enumerate() {
            y.set_column(j, &controls.column(k));
        }
        for (k, j) in self.tested().into_iter().enumerate() {
            y.set_column(j, &tested.column(k));
        }
        y
    }

    /// Same data with a different control set.
    pub fn with_controls(&self, controls: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.y.clone(),
            controls,
            self.outcome_names.clone(),
        )
    }

    /// Same data restricted to the given rows.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            linalg::select_rows(&self.x, rows),
            linalg::select_rows(&self.y, rows),
            self.control_idx.iter().copied(),
            self.outcome_names.clone(),
        )
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(PiiError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// A numeric matrix read from CSV together with its header.
#[derive(Debug, Clone)]
pub struct CsvMatrix {
    pub header: Vec<String>,
    pub data: DMatrix<f64>,
}

/// Read a CSV file with a header row into a matrix.
///
/// Non-numeric cells are rejected; `NaN`/`inf` parse but are rejected as
/// non-finite.
pub fn read_matrix_csv(path: &Path) -> Result<CsvMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let ncols = header.len();
    let mut values = Vec::new();
    let mut nrows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != ncols {
            return Err(PiiError::Dimension(format!(
                "row {i} of {} has {} cells, header has {ncols}",
                path.display(),
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| PiiError::NonNumeric {
                row: i,
                col: j,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PiiError::NonFinite { row: i, col: j });
            }
            values.push(v);
        }
        nrows += 1;
    }
    Ok(CsvMatrix {
        header,
        data: DMatrix::from_row_slice(nrows, ncols, &values),
    })
}

/// Format a double with 17 significant digits (round-trips exactly).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a matrix as CSV with the given header.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(PiiError::Dimension(format!(
            "{} header names for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| fmt_f64(m[(i, j)])))?;
    }
    w.flush()?;
    Ok(())
}

/// Load covariates, outcomes and (optionally) the control list.
///
/// The control file holds one outcome name or zero-based index per line;
/// names are matched exactly against the outcome header first.
pub fn load_dataset(x_path: &Path, y_path: &Path, controls_path: Option<&Path>) -> Result<Dataset> {
    let x = read_matrix_csv(x_path)?;
    let y = read_matrix_csv(y_path)?;
    if x.data.nrows() != y.data.nrows() {
        return Err(PiiError::Dimension(format!(
            "covariates have {} rows but outcomes have {}",
            x.data.nrows(),
            y.data.nrows()
        )));
    }
    let controls = match controls_path {
        Some(p) => resolve_controls(&fs::read_to_string(p)?, &y.header)?,
        None => Vec::new(),
    };
    Dataset::new(x.data, y.data, controls, Some(y.header))
}

/// Resolve control entries (names or indices, one per line) against `names`.
pub fn resolve_controls(text: &str, names: &[String]) -> Result<Vec<usize>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|entry| {
            if let Some(j) = names.iter().position(|n| n == entry) {
                Ok(j)
            } else {
                match entry.parse::<usize>() {
                    Ok(j) if j < names.len() => Ok(j),
                    _ => Err(PiiError::UnknownControl(entry.to_string())),
                }
            }
        })
        .collect()
}

/// Write a dataset back to disk in the same format `load_dataset` reads.
pub fn save_dataset(ds: &Dataset, x_path: &Path, y_path: &Path, controls_path: Option<&Path>) -> Result<()> {
    let xh: Vec<String> = (0..ds.d()).map(|k| format!("x{k}")).collect();
    let yh: Vec<String> = match ds.outcome_names() {
        Some(n) => n.to_vec(),
        None => (0..ds.p()).map(|j| format!("y{j}")).collect(),
    };
    write_matrix_csv(x_path, &xh, ds.x())?;
    write_matrix_csv(y_path, &yh, ds.y())?;
    if let Some(cp) = controls_path {
        let body: String = ds.controls().iter().map(|&j| format!("{}\n", yh[j])).collect();
        fs::write(cp, body)?;
    }
    Ok(())
}

/// Column transformation applied by [`column_standardize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    Center,
    CenterScale,
    None,
}

/// Record of a column standardization; invertible via [`ColumnTransform::invert`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Columns whose sample sd was zero and so were only centered.
    pub scale_fallback: Vec<bool>,
}

impl ColumnTransform {
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.means[j]) / self.scales[j])
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.scales[j] + self.means[j])
    }
}

/// Center (and optionally scale to unit sample sd) every column.
pub fn column_standardize(m: &DMatrix<f64>, mode: StandardizeMode) -> (DMatrix<f64>, ColumnTransform) {
    let p = m.ncols();
    let n = m.nrows();
    let mut tr = ColumnTransform {
        means: vec![0.0; p],
        scales: vec![1.0; p],
        scale_fallback: vec![false; p],
    };
    if mode != StandardizeMode::None {
        for j in 0..p {
            let col = m.column(j);
            let mean = col.mean();
            tr.means[j] = mean;
            if mode == StandardizeMode::CenterScale {
                let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
                let sd = if n > 1 { (ss / (n as f64 - 1.0)).sqrt() } else { 0.0 };
                if sd > 0.0 && sd.is_finite() {
                    tr.scales[j] = sd;
                } else {
                    tr.scale_fallback[j] = true;
                }
            }
        }
    }
    (tr.apply(m), tr)
}

/// How an embedding was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    Pca,
    Ruv,
    External,
}

/// Estimated latent embedding Û.
#[derive(Debug, Clone)]
pub struct EmbeddingResult {
    /// Scores, one row per observation the embedding was applied to.
    pub u_hat: DMatrix<f64>,
    /// Loadings over the control outcomes (|C| × r).
    pub loadings: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub method: EmbedMethod,
    pub preprocessing: Vec<PreprocessStep>,
    /// Dataset rows that `u_hat` corresponds to when sample splitting was
    /// used; `None` means all rows in order.
    pub rows: Option<Vec<usize>>,
}

impl EmbeddingResult {
    /// Wrap a user-supplied embedding (for instance the true latent factors).
    pub fn external(u_hat: DMatrix<f64>) -> Result<Self> {
        check_finite(&u_hat)?;
        if u_hat.ncols() == 0 {
            return Err(PiiError::Dimension("embedding has no columns".into()));
        }
        Ok(Self {
            loadings: DMatrix::zeros(0, u_hat.ncols()),
            singular_values: Vec::new(),
            method: EmbedMethod::External,
            preprocessing: Vec::new(),
            rows: None,
            u_hat,
        })
    }

    pub fn rank(&self) -> usize {
        self.u_hat.ncols()
    }

    /// Sidecar metadata written next to the score CSV.
    pub fn sidecar(&self) -> EmbeddingSidecar {
        EmbeddingSidecar {
            method: self.method,
            rank: self.rank(),
            preprocessing: self.preprocessing.clone(),
            singular_values: self.singular_values.clone(),
            rows: self.rows.clone(),
        }
    }

    pub fn write(&self, scores_csv: &Path, sidecar_json: &Path) -> Result<()> {
        let header: Vec<String> = (0..self.rank()).map(|k| format!("u{k}")).collect();
        write_matrix_csv(scores_csv, &header, &self.u_hat)?;
        fs::write(sidecar_json, serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub method: EmbedMethod,
    pub rank: usize,
    pub preprocessing: Vec<PreprocessStep>,
    pub singular_values: Vec<f64>,
    pub rows: Option<Vec<usize>>,
}

/// Per-outcome effect estimates with sandwich covariances and Wald tests.
///
/// Control columns carry effect 0 and NaN statistics ("not tested").
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DMatrix<f64>,
    pub cov_per_outcome: Vec<DMatrix<f64>>,
    pub sigma_hat: DMatrix<f64>,
    pub tstats: DMatrix<f64>,
    pub pvalues: DMatrix<f64>,
    pub tested: Vec<bool>,
    pub n_used: usize,
}

impl FitResult {
    pub fn d(&self) -> usize {
        self.beta_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.beta_hat.ncols()
    }

    pub fn is_tested(&self, j: usize) -> bool {
        self.tested[j]
    }

    pub fn tested_indices(&self) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.tested[j]).collect()
    }

    pub fn controls(&self) -> Vec<usize> {
        (0..self.p()).filter(|&j| !self.tested[j]).collect()
    }

    pub fn to_json(&self) -> FitResultJson {
        let d = self.d();
        let p = self.p();
        let opt = |m: &DMatrix<f64>| -> Vec<Vec<Option<f64>>> {
            (0..d)
                .map(|k| (0..p).map(|j| self.tested[j].then(|| m[(k, j)])).collect())
                .collect()
        };
        FitResultJson {
            beta: rows_of(&self.beta_hat),
            cov: (0..p)
                .map(|j| self.tested[j].then(|| rows_of(&self.cov_per_outcome[j])))
                .collect(),
            tstat: opt(&self.tstats),
            pvalue: opt(&self.pvalues),
            controls: self.controls(),
            sigma: rows_of(&self.sigma_hat),
            n_used: self.n_used,
        }
    }

    pub fn from_json(js: &FitResultJson) -> Result<Self> {
        let d = js.beta.len();
        let p = js.beta.first().map_or(0, Vec::len);
        if d == 0 || p == 0 || js.cov.len() != p {
            return Err(PiiError::Dimension("malformed fit result".into()));
        }
        let mut tested = vec![true; p];
        for &c in &js.controls {
            *tested.get_mut(c).ok_or_else(|| PiiError::UnknownControl(c.to_string()))? = false;
        }
        let mat = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            let nc = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != nc) {
                return Err(PiiError::Dimension("ragged matrix".into()));
            }
            Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
        };
        let optmat = |rows: &[Vec<Option<f64>>]| -> Result<DMatrix<f64>> {
            if rows.len() != d || rows.iter().any(|r| r.len() != p) {
                return Err(PiiError::Dimension("statistic matrix shape".into()));
            }
            Ok(DMatrix::from_fn(d, p, |i, j| rows[i][j].unwrap_or(f64::NAN)))
        };
        let cov = js
            .cov
            .iter()
            .map(|c| match c {
                Some(rows) => mat(rows),
                None => Ok(DMatrix::zeros(d, d)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta_hat: mat(&js.beta)?,
            cov_per_outcome: cov,
            sigma_hat: mat(&js.sigma)?,
            tstats: optmat(&js.tstat)?,
            pvalues: optmat(&js.pvalue)?,
            tested,
            n_used: js.n_used,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let js: FitResultJson = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_json(&js)
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// On-disk form of [`FitResult`]; untested entries serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResultJson {
    pub beta: Vec<Vec<f64>>,
    pub cov: Vec<Option<Vec<Vec<f64>>>>,
    pub tstat: Vec<Vec<Option<f64>>>,
    pub pvalue: Vec<Vec<Option<f64>>>,
    pub controls: Vec<usize>,
    pub sigma: Vec<Vec<f64>>,
    pub n_used: usize,
}
