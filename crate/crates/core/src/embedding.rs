//! Latent embedding estimation from surrogate control outcomes.
//!
//! Two recipes are provided: principal components of the (preprocessed)
//! control block, and RUV-style principal components of the control block
//! after projecting out `[1, X]`. Both fit the embedding map on a leading
//! fraction of rows (or on all rows) and apply it to the remaining rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{column_standardize, ColumnTransform, Dataset, EmbedMethod, EmbeddingResult, StandardizeMode};
use crate::error::{PiiError, Result};
use crate::linalg;

/// One preprocessing transform, applied in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum PreprocessStep {
    /// Rescale each row so its total over all outcomes equals `target_total`.
    LibrarySizeNormalize { target_total: f64 },
    Log1p,
    Center,
    /// Center and scale each column to unit sample sd.
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    Pca,
    Ruv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub method: EmbedKind,
    pub rank: usize,
    #[serde(default)]
    pub preprocessing: Vec<PreprocessStep>,
    /// Fraction of leading rows used to fit the embedding map; 0 fits and
    /// applies on the same rows.
    #[serde(default)]
    pub split_fraction: f64,
}

impl EmbedConfig {
    pub fn pca(rank: usize) -> Self {
        Self {
            method: EmbedKind::Pca,
            rank,
            preprocessing: Vec::new(),
            split_fraction: 0.0,
        }
    }

    pub fn ruv(rank: usize) -> Self {
        Self {
            method: EmbedKind::Ruv,
            ..Self::pca(rank)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(PiiError::Config("embedding rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.split_fraction) {
            return Err(PiiError::Config(format!(
                "split_fraction {} outside [0,1)",
                self.split_fraction
            )));
        }
        for s in &self.preprocessing {
            if let PreprocessStep::LibrarySizeNormalize { target_total } = s {
                if !(*target_total > 0.0) {
                    return Err(PiiError::Config("target_total must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Dispatch on `cfg.method`.
pub fn embed(dataset: &Dataset, cfg: &EmbedConfig) -> Result<EmbeddingResult> {
    match cfg.method {
        EmbedKind::Pca => pca_embed(dataset, cfg),
        EmbedKind::Ruv => ruv_embed(dataset, cfg),
    }
}

struct RowSplit {
    fit_rows: Vec<usize>,
    apply_rows: Vec<usize>,
    split: bool,
}

fn row_split(n: usize, frac: f64) -> Result<RowSplit> {
    if frac == 0.0 {
        let all: Vec<usize> = (0..n).collect();
        return Ok(RowSplit {
            fit_rows: all.clone(),
            apply_rows: all,
            split: false,
        });
    }
    let m = (frac * n as f64).ceil() as usize;
    if m < 2 || m >= n {
        return Err(PiiError::Invalid(format!(
            "split_fraction {frac} leaves {m} of {n} rows for fitting"
        )));
    }
    Ok(RowSplit {
        fit_rows: (0..m).collect(),
        apply_rows: (m..n).collect(),
        split: true,
    })
}

/// Fitted preprocessing chain; column statistics come from the fit rows.
struct Preprocessor {
    steps: Vec<PreprocessStep>,
    column_stats: Vec<Option<ColumnTransform>>,
}

impl Preprocessor {
    fn fit(steps: &[PreprocessStep], yc: &DMatrix<f64>, totals: &[f64]) -> Result<(Self, DMatrix<f64>)> {
        let mut m = yc.clone();
        let mut stats = Vec::with_capacity(steps.len());
        for step in steps {
            let fitted = match step {
                PreprocessStep::Center => {
                    let (out, tr) = column_standardize(&m, StandardizeMode::Center);
                    m = out;
                    Some(tr)
                }
                PreprocessStep::Scale => {
                    let (out, tr) = column_standardize(&m, StandardizeMode::CenterScale);
                    m = out;
                    Some(tr)
                }
                stateless => {
                    m = apply_rowwise(stateless, m, totals)?;
                    None
                }
            };
            stats.push(fitted);
        }
        Ok((
            Self {
                steps: steps.to_vec(),
                column_stats: stats,
            },
            m,
        ))
    }

    fn apply(&self, yc: &DMatrix<f64>, totals: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = yc.clone();
        for (step, tr) in self.steps.iter().zip(&self.column_stats) {
            m = match tr {
                Some(tr) => tr.apply(&m),
                None => apply_rowwise(step, m, totals)?,
            };
        }
        Ok(m)
    }
}

fn apply_rowwise(step: &PreprocessStep, mut m: DMatrix<f64>, totals: &[f64]) -> Result<DMatrix<f64>> {
    match step {
        PreprocessStep::LibrarySizeNormalize { target_total } => {
            for (i, &t) in totals.iter().enumerate() {
                if !(t > 0.0) {
                    return Err(PiiError::Invalid(format!(
                        "row {i} has nonpositive library size {t}"
                    )));
                }
                let f = target_total / t;
                m.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
        }
        PreprocessStep::Log1p => {
            if let Some(v) = m.iter().find(|v| **v <= -1.0) {
                return Err(PiiError::Invalid(format!("log1p of {v}")));
            }
            m.iter_mut().for_each(|v| *v = v.ln_1p());
        }
        PreprocessStep::Center | PreprocessStep::Scale => unreachable!("column steps are fitted"),
    }
    Ok(m)
}

/// Truncated principal components of a centered matrix with deterministic signs.
struct PrincipalAxes {
    loadings: DMatrix<f64>,
    singular_values: Vec<f64>,
}

fn principal_axes(centered: &DMatrix<f64>, rank: usize) -> PrincipalAxes {
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let c = centered.ncols();
    let mut loadings = DMatrix::zeros(c, rank);
    for (k, &o) in order.iter().take(rank).enumerate() {
        let mut col: Vec<f64> = v_t.row(o).iter().copied().collect();
        let mut lead = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        loadings.set_column(k, &nalgebra::DVector::from_vec(col));
    }
    PrincipalAxes {
        loadings,
        singular_values: order.iter().take(rank).map(|&o| s[o]).collect(),
    }
}

fn row_totals(y: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| y.row(i).sum()).collect()
}

fn is_numerically_zero(m: &DMatrix<f64>, reference: f64) -> bool {
    let norm = m.norm();
    norm == 0.0 || norm <= 1e-10 * reference
}

/// Principal-component scores of the preprocessed, column-centered control block.
pub fn pca_embed(dataset: &Dataset, cfg: &EmbedConfig) -> Result<EmbeddingResult> {
    if cfg.method != EmbedKind::Pca {
        return Err(PiiError::Config("pca_embed called with a non-pca config".into()));
    }
    cfg.validate()?;
    let split = row_split(dataset.n(), cfg.split_fraction)?;
    let yc = dataset.y_controls();
    let c = yc.ncols();
    if cfg.rank > split.fit_rows.len().min(c) {
        return Err(PiiError::Invalid(format!(
            "rank {} exceeds min(n={}, |C|={c})",
            cfg.rank,
            split.fit_rows.len()
        )));
    }
    let fit_block = linalg::select_rows(&yc, &split.fit_rows);
    let (pre, processed) = Preprocessor::fit(&cfg.preprocessing, &fit_block, &row_totals(dataset.y(), &split.fit_rows))?;
    let (centered, center) = column_standardize(&processed, StandardizeMode::Center);
    if is_numerically_zero(&centered, processed.norm()) {
        return Err(PiiError::ZeroMatrix);
    }
    let axes = principal_axes(&centered, cfg.rank);
    let applied = if split.split {
        let block = linalg::select_rows(&yc, &split.apply_rows);
        center.apply(&pre.apply(&block, &row_totals(dataset.y(), &split.apply_rows))?)
    } else {
        centered
    };
    Ok(EmbeddingResult {
        u_hat: &applied * &axes.loadings,
        loadings: axes.loadings,
        singular_values: axes.singular_values,
        method: EmbedMethod::Pca,
        preprocessing: cfg.preprocessing.clone(),
        rows: split.split.then_some(split.apply_rows),
    })
}

/// Principal-component scores of the control block after removing its
/// least-squares fit on `[1, X]`.
pub fn ruv_embed(dataset: &Dataset, cfg: &EmbedConfig) -> Result<EmbeddingResult> {
    if cfg.method != EmbedKind::Ruv {
        return Err(PiiError::Config("ruv_embed called with a non-ruv config".into()));
    }
    cfg.validate()?;
    let split = row_split(dataset.n(), cfg.split_fraction)?;
    let yc = dataset.y_controls();
    let c = yc.ncols();
    let n0 = split.fit_rows.len();
    let d = dataset.d();
    if n0 < d + 2 || cfg.rank > (n0 - d - 1).min(c) {
        return Err(PiiError::Invalid(format!(
            "rank {} exceeds min(n-d-1={}, |C|={c})",
            cfg.rank,
            n0.saturating_sub(d + 1)
        )));
    }
    let fit_block = linalg::select_rows(&yc, &split.fit_rows);
    let (pre, processed) = Preprocessor::fit(&cfg.preprocessing, &fit_block, &row_totals(dataset.y(), &split.fit_rows))?;
    let design = linalg::prepend_ones(&linalg::select_rows(dataset.x(), &split.fit_rows));
    let coef = linalg::lstsq(&design, &processed)
        .map_err(|_| PiiError::RankDeficient("covariate matrix [1, X]".into()))?;
    let resid = &processed - &design * &coef;
    let (centered, center) = column_standardize(&resid, StandardizeMode::Center);
    if is_numerically_zero(&centered, processed.norm()) {
        return Err(PiiError::ZeroMatrix);
    }
    let axes = principal_axes(&centered, cfg.rank);
    let applied = if split.split {
        let block = linalg::select_rows(&yc, &split.apply_rows);
        let proc1 = pre.apply(&block, &row_totals(dataset.y(), &split.apply_rows))?;
        let des1 = linalg::prepend_ones(&linalg::select_rows(dataset.x(), &split.apply_rows));
        center.apply(&(proc1 - des1 * &coef))
    } else {
        centered
    };
    Ok(EmbeddingResult {
        u_hat: &applied * &axes.loadings,
        loadings: axes.loadings,
        singular_values: axes.singular_values,
        method: EmbedMethod::Ruv,
        preprocessing: cfg.preprocessing.clone(),
        rows: split.split.then_some(split.apply_rows),
    })
}

/// Spectral norm of `P⊥(u_est) − P⊥(u_true)`: the sine of the largest
/// principal angle between the two column spaces (1 when ranks differ).
pub fn projection_gap(u_true: &DMatrix<f64>, u_est: &DMatrix<f64>) -> Result<f64> {
    if u_true.nrows() != u_est.nrows() {
        return Err(PiiError::Dimension(format!(
            "embeddings have {} and {} rows",
            u_true.nrows(),
            u_est.nrows()
        )));
    }
    let qa = linalg::full_rank_basis(u_true, "true embedding")?;
    let qb = linalg::full_rank_basis(u_est, "estimated embedding")?;
    Ok(linalg::projector_distance(&qa, &qb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset_from_controls(yc: DMatrix<f64>, x: DMatrix<f64>) -> Dataset {
        let n = yc.nrows();
        let c = yc.ncols();
        let mut y = DMatrix::zeros(n, c + 1);
        y.columns_mut(0, c).copy_from(&yc);
        y.set_column(c, &DMatrix::from_fn(n, 1, |i, _| i as f64).column(0));
        Dataset::new(x, y, 0..c, None).unwrap()
    }

    #[test]
    fn rank_one_controls_are_reconstructed() {
        let n = 6;
        let u = [1.0, -2.0, 0.5, 0.5, 3.0, -3.0];
        let w = [2.0, -1.0, 0.25];
        let yc = DMatrix::from_fn(n, 3, |i, j| u[i] * w[j]);
        let x = DMatrix::from_fn(n, 1, |i, _| (i * i) as f64);
        let ds = dataset_from_controls(yc.clone(), x);
        let emb = pca_embed(&ds, &EmbedConfig::pca(1)).unwrap();
        let recon = &emb.u_hat * emb.loadings.transpose();
        assert!((recon - &yc).abs().max() < 1e-10);
        let uvec = DMatrix::from_row_slice(n, 1, &u);
        assert!(projection_gap(&uvec, &emb.u_hat).unwrap() < 1e-10);
    }

    #[test]
    fn two_by_two_matches_gram_eigenproblem() {
        // Gram of [[1,0],[-1,0]] is diag(2,0); leading eigenvector e1, eigenvalue 2,
        // so the scores are ±(1,-1) and the singular value is sqrt(2).
        let yc = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let ds = dataset_from_controls(yc, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        let emb = pca_embed(&ds, &EmbedConfig::pca(1)).unwrap();
        assert!((emb.singular_values[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((emb.loadings[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((emb.u_hat[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((emb.u_hat[(1, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let yc = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64);
        let ds = dataset_from_controls(yc, DMatrix::from_fn(5, 1, |i, _| i as f64));
        assert!(pca_embed(&ds, &EmbedConfig::pca(3)).is_err());
    }

    #[test]
    fn zero_controls_are_rejected() {
        let yc = DMatrix::from_element(5, 2, 3.0);
        let ds = dataset_from_controls(yc, DMatrix::from_fn(5, 1, |i, _| i as f64));
        assert!(matches!(pca_embed(&ds, &EmbedConfig::pca(1)), Err(PiiError::ZeroMatrix)));
    }

    #[test]
    fn ruv_matches_pca_when_controls_are_uncorrelated_with_x() {
        // x is orthogonal to every centered control column.
        let x = DMatrix::from_row_slice(6, 1, &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let yc = DMatrix::from_row_slice(6, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, -1.0, 0.0, -1.0, 3.0, 0.5, 3.0, 0.5]);
        let ds = dataset_from_controls(yc, x);
        let a = pca_embed(&ds, &EmbedConfig::pca(2)).unwrap();
        let b = ruv_embed(&ds, &EmbedConfig::ruv(2)).unwrap();
        assert!((a.u_hat - b.u_hat).abs().max() < 1e-10);
    }

    #[test]
    fn ruv_with_controls_explained_by_x_is_zero() {
        let x = DMatrix::from_fn(8, 1, |i, _| (i as f64).sin());
        let yc = DMatrix::from_fn(8, 3, |i, j| x[(i, 0)] * (j as f64 + 1.0) + 2.0);
        let ds = dataset_from_controls(yc, x);
        assert!(matches!(ruv_embed(&ds, &EmbedConfig::ruv(1)), Err(PiiError::ZeroMatrix)));
    }

    #[test]
    fn ruv_rejects_rank_deficient_covariates() {
        let x = DMatrix::from_fn(8, 2, |i, _| i as f64);
        let yc = DMatrix::from_fn(8, 3, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let ds = dataset_from_controls(yc, x);
        assert!(matches!(ruv_embed(&ds, &EmbedConfig::ruv(1)), Err(PiiError::RankDeficient(_))));
    }

    #[test]
    fn projection_gap_examples() {
        let e1 = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e2 = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((projection_gap(&e1, &e2).unwrap() - 1.0).abs() < 1e-12);
        // P_a = diag(1,0); P_b = [[.5,.5],[.5,.5]]; difference has eigenvalues ±1/sqrt(2).
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]) / 2f64.sqrt();
        assert!((projection_gap(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let u = DMatrix::from_fn(5, 2, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64 * j as f64);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        assert!(projection_gap(&u, &(&u * r)).unwrap() < 1e-12);
        let bad = DMatrix::from_fn(5, 2, |i, _| i as f64);
        assert!(projection_gap(&bad, &u).is_err());
    }

    #[test]
    fn split_fraction_applies_map_to_held_out_rows() {
        let n = 20;
        let yc = DMatrix::from_fn(n, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 + (i as f64) * 0.1 * j as f64);
        let ds = dataset_from_controls(yc, DMatrix::from_fn(n, 1, |i, _| (i as f64).cos()));
        let cfg = EmbedConfig {
            split_fraction: 0.5,
            ..EmbedConfig::pca(2)
        };
        let emb = pca_embed(&ds, &cfg).unwrap();
        assert_eq!(emb.u_hat.nrows(), 10);
        assert_eq!(emb.rows.as_deref(), Some(&(10..20).collect::<Vec<_>>()[..]));
    }
}
