//! Per-outcome parametric regressions used as comparison methods and for
//! control selection: least squares and IRLS logistic regression, both
//! with model-based Wald covariances.

use nalgebra::{DMatrix, DVector};

use crate::dr::expit;
use crate::error::{PiiError, Result};
use crate::linalg;

pub const IRLS_MAX_ITER: usize = 50;
pub const IRLS_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl GlmFit {
    /// Wald statistic of coefficient `k`.
    pub fn wald(&self, k: usize) -> f64 {
        self.coef[k] / self.cov[(k, k)].sqrt()
    }
}

/// Least squares with covariance σ̂²(ZᵀZ)⁻¹, σ̂² = RSS/(n − k).
pub fn ols_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlmFit> {
    let (n, k) = design.shape();
    if n <= k {
        return Err(PiiError::Invalid(format!("{n} rows for {k} coefficients")));
    }
    let ym = DMatrix::from_column_slice(n, 1, y.as_slice());
    let coef = linalg::lstsq(design, &ym)?.column(0).into_owned();
    let resid = y - design * &coef;
    let s2 = resid.norm_squared() / (n - k) as f64;
    let cov = linalg::spd_inverse(&(design.transpose() * design))? * s2;
    Ok(GlmFit {
        coef,
        cov,
        converged: true,
        iterations: 1,
    })
}

/// Logistic regression by iteratively reweighted least squares, covariance
/// from the inverse Fisher information at the final iterate.
pub fn logistic_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlmFit> {
    let (n, k) = design.shape();
    if n <= k {
        return Err(PiiError::Invalid(format!("{n} rows for {k} coefficients")));
    }
    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(k, k);
    for it in 1..=IRLS_MAX_ITER {
        iterations = it;
        let eta = design * &beta;
        let mu = eta.map(expit);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let mut wz = design.clone();
        for (i, mut row) in wz.row_iter_mut().enumerate() {
            row *= w[i];
        }
        info = design.transpose() * &wz;
        let score = design.transpose() * (y - &mu);
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| PiiError::Singular("logistic information matrix".into()))?;
        let step = chol.solve(&score);
        beta += &step;
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(PiiError::Numerical("IRLS diverged".into()));
        }
        if step.amax() <= IRLS_TOL * (1.0 + beta.amax()) {
            converged = true;
            let eta = design * &beta;
            let mut wz = design.clone();
            for (i, mut row) in wz.row_iter_mut().enumerate() {
                let m = expit(eta[i]);
                row *= (m * (1.0 - m)).max(1e-12);
            }
            info = design.transpose() * &wz;
            break;
        }
    }
    let cov = linalg::spd_inverse(&info)?;
    Ok(GlmFit {
        coef: beta,
        cov,
        converged,
        iterations,
    })
}
