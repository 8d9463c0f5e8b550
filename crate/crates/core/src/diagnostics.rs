//! Exact checks of the deterministic finite-sample results: the empirical
//! bias bound for linear nuisances, the perturbed-linear-system bound, the
//! Frisch–Waugh–Lovell identities, and the bias-versus-embedding-error trend.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingResult};
use crate::dr::{fit_linear, DrOptions, LinkFunction};
use crate::error::{PiiError, Result};
use crate::linalg;
use crate::rng;
use crate::simulation::LinearGaussian;

/// ‖P⊥_{[1,Û]} − P⊥_{[1,U]}‖: the projection gap with intercepts included.
pub fn affine_projection_gap(u_true: &DMatrix<f64>, u_est: &DMatrix<f64>) -> Result<f64> {
    if u_true.nrows() != u_est.nrows() {
        return Err(PiiError::Dimension(format!(
            "embeddings have {} and {} rows",
            u_true.nrows(),
            u_est.nrows()
        )));
    }
    let qa = linalg::full_rank_basis(&linalg::prepend_ones(u_true), "[1, U]")?;
    let qb = linalg::full_rank_basis(&linalg::prepend_ones(u_est), "[1, Û]")?;
    Ok(linalg::projector_distance(&qa, &qb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundReport {
    pub s_norm: f64,
    pub kappa_s: f64,
    pub proj_gap: f64,
    /// max_j ‖Y_{·j}‖²/n
    pub gamma_inf: f64,
    pub b_colmax: f64,
    /// (‖b‖_{2,∞} + ‖S‖^{-1/2}·sqrt(‖Γ‖_∞))·κg/(1 − κg); `None` when not applicable.
    pub bound: Option<f64>,
    /// Same with ‖Γ‖_∞ in place of its square root.
    pub bound_as_stated: Option<f64>,
    pub actual: f64,
    pub applicable: bool,
    /// ‖XᵀX/n‖; equals ‖S‖ when X is orthogonal to [1, U].
    pub x_gram_norm: f64,
}

impl BiasBoundReport {
    pub fn holds(&self) -> bool {
        self.bound.is_none_or(|b| self.actual <= b)
    }
}

struct Projected {
    s: DMatrix<f64>,
    b: DMatrix<f64>,
}

fn project_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, q: &DMatrix<f64>, what: &str) -> Result<Projected> {
    let n = x.nrows() as f64;
    let rx = linalg::project_out(q, x);
    let mut s = rx.transpose() * &rx / n;
    linalg::symmetrize(&mut s);
    let s_inv = linalg::spd_inverse(&s).map_err(|_| PiiError::RankDeficient(what.into()))?;
    let b = s_inv * (rx.transpose() * y) / n;
    Ok(Projected { s, b })
}

/// Deterministic bias of the exact double-residual estimator when the true
/// embedding is replaced by an estimate, against its bound.
pub fn bias_bound_linear(dataset: &Dataset, u_true: &DMatrix<f64>, u_est: &DMatrix<f64>) -> Result<BiasBoundReport> {
    let n = dataset.n();
    if u_true.nrows() != n || u_est.nrows() != n {
        return Err(PiiError::Dimension("embedding rows differ from the dataset".into()));
    }
    let (x, y) = (dataset.x(), dataset.y());
    let qa = linalg::full_rank_basis(&linalg::prepend_ones(u_true), "[1, U]")?;
    let qb = linalg::full_rank_basis(&linalg::prepend_ones(u_est), "[1, Û]")?;
    let truth = project_fit(x, y, &qa, "S is rank deficient")?;
    let est = project_fit(x, y, &qb, "S̃ is rank deficient")?;

    let s_norm = linalg::op_norm(&truth.s);
    let kappa_s = linalg::cond(&truth.s);
    let proj_gap = linalg::projector_distance(&qa, &qb);
    let gamma_inf = y.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max) / n as f64;
    let b_colmax = truth.b.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let actual = dataset
        .tested()
        .into_iter()
        .map(|j| (est.b.column(j) - truth.b.column(j)).norm())
        .fold(0.0, f64::max);
    let kg = kappa_s * proj_gap;
    let applicable = kg < 1.0;
    let factor = kg / (1.0 - kg);
    let bound = applicable.then(|| (b_colmax + gamma_inf.sqrt() / s_norm.sqrt()) * factor);
    let bound_as_stated = applicable.then(|| (b_colmax + gamma_inf / s_norm.sqrt()) * factor);
    Ok(BiasBoundReport {
        s_norm,
        kappa_s,
        proj_gap,
        gamma_inf,
        b_colmax,
        bound,
        bound_as_stated,
        actual,
        applicable,
        x_gram_norm: linalg::op_norm(&(x.transpose() * x)) / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardErrorReport {
    pub kappa: f64,
    /// ‖Δa‖/‖a‖
    pub rel_perturbation: f64,
    /// κ·‖Δa‖/‖a‖ < 1
    pub applicable: bool,
    pub bound_abs: Option<f64>,
    /// Relative bound; absent when b = 0 or inapplicable.
    pub bound_rel: Option<f64>,
    /// ‖(a+Δa)⁻¹(b+Δb) − a⁻¹b‖; absent when a+Δa is singular.
    pub actual_abs: Option<f64>,
    pub actual_rel: Option<f64>,
}

impl BackwardErrorReport {
    pub fn holds(&self) -> bool {
        match (self.bound_abs, self.actual_abs) {
            (Some(b), Some(a)) => a <= b && self.bound_rel.zip(self.actual_rel).is_none_or(|(br, ar)| ar <= br),
            _ => true,
        }
    }
}

/// Error of a perturbed linear system against the condition-number bound.
pub fn backward_error_bound(a: &DMatrix<f64>, delta_a: &DMatrix<f64>, b: &DVector<f64>, delta_b: &DVector<f64>) -> Result<BackwardErrorReport> {
    let k = a.nrows();
    if a.ncols() != k || delta_a.shape() != (k, k) || b.len() != k || delta_b.len() != k {
        return Err(PiiError::Dimension("system dimensions do not match".into()));
    }
    let lu = a.clone().lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| PiiError::Singular("system matrix".into()))?;
    let a_norm = linalg::op_norm(a);
    let kappa = linalg::cond(a);
    if !kappa.is_finite() {
        return Err(PiiError::Singular("system matrix".into()));
    }
    let rel = linalg::op_norm(delta_a) / a_norm;
    let applicable = kappa * rel < 1.0;
    let denom = 1.0 - kappa * rel;
    let x_norm = x.norm();
    let db = delta_b.norm();
    let bound_abs = applicable.then(|| (x_norm * kappa * rel + kappa * db / a_norm) / denom);
    let bound_rel = (applicable && b.norm() > 0.0).then(|| kappa * (rel + db / b.norm()) / denom);
    let actual_abs = (a + delta_a)
        .lu()
        .solve(&(b + delta_b))
        .filter(|xh| xh.iter().all(|v| v.is_finite()))
        .map(|xh| (xh - &x).norm());
    let actual_rel = actual_abs.filter(|_| x_norm > 0.0).map(|v| v / x_norm);
    Ok(BackwardErrorReport {
        kappa,
        rel_perturbation: rel,
        applicable,
        bound_abs,
        bound_rel,
        actual_abs,
        actual_rel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwlReport {
    /// Max |joint-OLS X-block − double-residual coefficient|.
    pub coef_gap: f64,
    /// Max |joint-OLS HC0 X-block − double-residual HC0|.
    pub hc0_gap: f64,
    /// Max relative gap between (n−d−r−1)·V_one and (n−d)·V_two, the
    /// homoskedastic covariances of the joint and the two-step fits.
    pub homoskedastic_rel_gap: f64,
    pub n: usize,
    pub d: usize,
    pub r: usize,
}

/// Joint regression of every tested outcome on [1, X, U] against the
/// two-step double-residual fit with in-sample least-squares nuisances.
pub fn fwl_check(dataset: &Dataset, u: &DMatrix<f64>) -> Result<FwlReport> {
    let (n, d, r) = (dataset.n(), dataset.d(), u.ncols());
    if u.nrows() != n {
        return Err(PiiError::Dimension("embedding rows differ from the dataset".into()));
    }
    let k = 1 + d + r;
    if n <= k {
        return Err(PiiError::RankDeficient(format!("n={n} rows for {k} regressors")));
    }
    let z = linalg::prepend_ones(&linalg::hcat(dataset.x(), u));
    let yt = dataset.y_tested();
    let coef = linalg::lstsq(&z, &yt)?;
    let zinv = linalg::spd_inverse(&(z.transpose() * &z))
        .map_err(|_| PiiError::RankDeficient("[1, X, U]".into()))?;
    let resid = &yt - &z * &coef;

    let opts = DrOptions {
        n_folds: 1,
        ..DrOptions::ols(LinkFunction::Identity)
    };
    let two = fit_linear(dataset, &EmbeddingResult::external(u.clone())?, &opts)?;
    let rx = &two.rx;
    let rx_gram_inv = linalg::spd_inverse(&(rx.transpose() * rx))?;

    let (mut coef_gap, mut hc0_gap, mut homo_gap) = (0.0f64, 0.0f64, 0.0f64);
    for (t, j) in dataset.tested().into_iter().enumerate() {
        for a in 0..d {
            coef_gap = coef_gap.max((coef[(1 + a, t)] - two.result.beta_hat[(a, j)]).abs());
        }
        let mut meat = DMatrix::zeros(k, k);
        for i in 0..n {
            let zi = z.row(i).transpose();
            meat += &zi * zi.transpose() * resid[(i, t)].powi(2);
        }
        let hc0 = &zinv * meat * &zinv;
        let rss = resid.column(t).norm_squared();
        let s_one = rss / (n - k) as f64;
        let s_two = two.resid.column(j).norm_squared() / (n - d) as f64;
        for a in 0..d {
            for b in 0..d {
                hc0_gap = hc0_gap.max((hc0[(1 + a, 1 + b)] - two.result.cov_per_outcome[j][(a, b)]).abs());
                let lhs = (n - k) as f64 * s_one * zinv[(1 + a, 1 + b)];
                let rhs = (n - d) as f64 * s_two * rx_gram_inv[(a, b)];
                let scale = lhs.abs().max(rhs.abs());
                if scale > 0.0 {
                    homo_gap = homo_gap.max((lhs - rhs).abs() / scale);
                }
            }
        }
    }
    Ok(FwlReport {
        coef_gap,
        hc0_gap,
        homoskedastic_rel_gap: homo_gap,
        n,
        d,
        r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub noise: f64,
    /// Mean over replications of the affine projection gap.
    pub proj_gap: f64,
    /// Mean over replications of max_j ‖b̃_{·j} − b_{·j}‖ over tested outcomes,
    /// where b uses the true embedding.
    pub bias: f64,
    /// Median over replications and tested outcomes of ‖b̃_{·j} − b_{·j}‖.
    pub median_outcome_bias: f64,
    /// Mean over replications of max_j ‖b̃_{·j} − β_{·j}‖ (includes sampling error).
    pub error_vs_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    /// Rank correlation of `proj_gap` and `bias` across levels.
    pub spearman: f64,
}

struct TrendRep {
    gap: f64,
    bias: Vec<f64>,
    error: f64,
}

/// Bias of the exact double-residual estimator as the embedding degrades:
/// Û = U + noise·N(0, 1) at each noise level.
pub fn bias_trend(dgp: &LinearGaussian, noise_levels: &[f64], replications: usize, seed: u64) -> Result<TrendReport> {
    if noise_levels.is_empty() || replications == 0 {
        return Err(PiiError::Config("need at least one noise level and replication".into()));
    }
    let rows = noise_levels
        .iter()
        .enumerate()
        .map(|(level, &noise)| {
            let per_rep: Vec<TrendRep> = (0..replications)
                .into_par_iter()
                .map(|rep| {
                    let inst = dgp.generate(seed, rep)?;
                    let mut g = rng::stream(seed, &[rep as u64, 0xB1A5, level as u64]);
                    let u_est = &inst.u + DMatrix::from_fn(dgp.n, dgp.r, |_, _| noise * g.sample::<f64, _>(StandardNormal));
                    let (x, y) = (inst.dataset.x(), inst.dataset.y());
                    let qa = linalg::full_rank_basis(&linalg::prepend_ones(&inst.u), "[1, U]")?;
                    let qb = linalg::full_rank_basis(&linalg::prepend_ones(&u_est), "[1, Û]")?;
                    let base = project_fit(x, y, &qa, "S is rank deficient")?;
                    let fit = project_fit(x, y, &qb, "S̃ is rank deficient")?;
                    let tested = inst.dataset.tested();
                    let bias = tested.iter().map(|&j| (fit.b.column(j) - base.b.column(j)).norm()).collect();
                    let error = tested
                        .iter()
                        .map(|&j| (fit.b.column(j) - inst.beta.column(j)).norm())
                        .fold(0.0, f64::max);
                    Ok(TrendRep {
                        gap: linalg::projector_distance(&qa, &qb),
                        bias,
                        error,
                    })
                })
                .collect::<Result<_>>()?;
            let k = replications as f64;
            let mut all: Vec<f64> = per_rep.iter().flat_map(|r| r.bias.iter().copied()).collect();
            all.sort_by(f64::total_cmp);
            Ok(TrendRow {
                noise,
                proj_gap: per_rep.iter().map(|r| r.gap).sum::<f64>() / k,
                bias: per_rep.iter().map(|r| r.bias.iter().copied().fold(0.0, f64::max)).sum::<f64>() / k,
                median_outcome_bias: median_sorted(&all),
                error_vs_truth: per_rep.iter().map(|r| r.error).sum::<f64>() / k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.proj_gap).collect();
    let bias: Vec<f64> = rows.iter().map(|r| r.bias).collect();
    Ok(TrendReport {
        spearman: linalg::spearman(&gaps, &bias),
        rows,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => v[k / 2],
        k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
    }
}

/// Replace X by its component orthogonal to [1, U], the setting in which
/// ‖XᵀX/n‖ = ‖S‖.
pub fn orthogonalize_treatment(ds: &Dataset, u: &DMatrix<f64>) -> Result<Dataset> {
    let q = linalg::full_rank_basis(&linalg::prepend_ones(u), "[1, U]")?;
    let x = linalg::project_out(&q, ds.x());
    Dataset::new(x, ds.y().clone(), ds.controls().to_vec(), ds.outcome_names().map(<[String]>::to_vec))
}

/// `fwl_check` on seeded linear-Gaussian instances.
pub fn fwl_instances(dgp: &LinearGaussian, instances: usize, seed: u64) -> Result<Vec<FwlReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let inst = dgp.generate(seed, i)?;
            fwl_check(&inst.dataset, &inst.u)
        })
        .collect()
}

/// `bias_bound_linear` on seeded instances with Û = U + noise·N(0, 1).
pub fn bias_bound_instances(dgp: &LinearGaussian, instances: usize, noise: f64, orthogonalize: bool, seed: u64) -> Result<Vec<BiasBoundReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let inst = dgp.generate(seed, i)?;
            let ds = if orthogonalize {
                orthogonalize_treatment(&inst.dataset, &inst.u)?
            } else {
                inst.dataset.clone()
            };
            let mut g = rng::stream(seed, &[i as u64, 0xE57]);
            let u_est = &inst.u + DMatrix::from_fn(dgp.n, dgp.r, |_, _| noise * g.sample::<f64, _>(StandardNormal));
            bias_bound_linear(&ds, &inst.u, &u_est)
        })
        .collect()
}

/// `backward_error_bound` on seeded systems a = 3I + G/√k with Gaussian G,
/// b Gaussian, and perturbations of relative size `perturbation`.
pub fn backward_error_instances(instances: usize, dim: usize, perturbation: f64, seed: u64) -> Result<Vec<BackwardErrorReport>> {
    if dim == 0 {
        return Err(PiiError::Config("system dimension must be positive".into()));
    }
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream(seed, &[i as u64, 0xBAC]);
            let mut z = || g.sample::<f64, _>(StandardNormal);
            let scale = 1.0 / (dim as f64).sqrt();
            let a = DMatrix::from_fn(dim, dim, |r, c| if r == c { 3.0 } else { 0.0 } + z() * scale);
            let b = DVector::from_fn(dim, |_, _| z());
            let da = DMatrix::from_fn(dim, dim, |_, _| z() * perturbation * scale);
            let db = DVector::from_fn(dim, |_, _| z() * perturbation);
            backward_error_bound(&a, &da, &b, &db)
        })
        .collect()
}
