//! Dense linear-algebra helpers shared by the estimators and diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{PiiError, Result};

/// Relative singular-value cutoff used for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// `[1, m]`: the matrix with a leading column of ones.
pub fn prepend_ones(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(m.nrows(), m.ncols() + 1, 1.0);
    out.columns_mut(1, m.ncols()).copy_from(m);
    out
}

/// Horizontal concatenation `[a, b]`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

pub fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (k, &j) in idx.iter().enumerate() {
        out.set_column(k, &m.column(j));
    }
    out
}

pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Largest singular value (spectral norm).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Sorted (descending) singular values.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number of a square matrix; infinite when singular.
pub fn cond(m: &DMatrix<f64>) -> f64 {
    let s = singular_values_desc(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Orthonormal basis of the column space of `a` together with its numerical rank.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s = &svd.singular_values;
    let smax = s.max();
    let keep: Vec<usize> = (0..s.len())
        .filter(|&k| smax > 0.0 && s[k] > RANK_TOL * smax)
        .collect();
    (select_columns(&u, &keep), keep.len())
}

/// Orthonormal basis of a matrix that must have full column rank.
pub fn full_rank_basis(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (q, rank) = orthonormal_basis(a);
    if rank < a.ncols() {
        return Err(PiiError::RankDeficient(format!(
            "{what}: rank {rank} < {} columns",
            a.ncols()
        )));
    }
    Ok(q)
}

/// `m - q qᵀ m` for an orthonormal `q`.
pub fn project_out(q: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    m - q * (q.transpose() * m)
}

/// Spectral norm of `P_A − P_B` for orthonormal bases `qa`, `qb`.
///
/// Uses ‖P_A − P_B‖ = max(‖P_B⊥ P_A‖, ‖P_A⊥ P_B‖), so only n×r matrices are formed.
pub fn projector_distance(qa: &DMatrix<f64>, qb: &DMatrix<f64>) -> f64 {
    let a = op_norm(&project_out(qb, qa));
    let b = op_norm(&project_out(qa, qb));
    a.max(b).min(1.0)
}

/// Least-squares coefficients of `targets` on `design` via thin QR.
pub fn lstsq(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = design.shape();
    if n < k {
        return Err(PiiError::RankDeficient(format!(
            "design has {n} rows and {k} columns"
        )));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let diag_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= RANK_TOL * diag_max) || diag_max == 0.0 {
        return Err(PiiError::RankDeficient("least-squares design".into()));
    }
    let qty = qr.q().transpose() * targets;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| PiiError::Singular("triangular solve".into()))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| PiiError::Singular("matrix is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// Symmetrize in place: (m + mᵀ)/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Column means.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Slope of the ordinary least-squares line through `(x, y)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
