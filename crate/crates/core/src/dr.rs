//! Doubly robust effect estimation by double residualization, for identity
//! and nonlinear links, with influence-function sandwich variances.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Dataset, EmbeddingResult, FitResult};
use crate::error::{PiiError, Result};
use crate::linalg;
use crate::nuisance::{fit_crossfit, fit_predict_crossfit, CrossFitPlan, ForestParams, LearnerSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    Logit,
    Log,
}

impl LinkFunction {
    pub fn g(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Logit => (mu / (1.0 - mu)).ln(),
            LinkFunction::Log => mu.ln(),
        }
    }

    pub fn g_prime(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Logit => 1.0 / (mu * (1.0 - mu)),
            LinkFunction::Log => 1.0 / mu,
        }
    }

    pub fn inverse(self, z: f64) -> f64 {
        match self {
            LinkFunction::Identity => z,
            LinkFunction::Logit => expit(z),
            LinkFunction::Log => z.exp(),
        }
    }

    /// Open interval on which `g` is defined.
    pub fn domain(self) -> (f64, f64) {
        match self {
            LinkFunction::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            LinkFunction::Logit => (0.0, 1.0),
            LinkFunction::Log => (0.0, f64::INFINITY),
        }
    }

    /// Clamp a mean prediction into `[eps, 1-eps]` (logit) or `[eps, inf)`
    /// (log). Returns the value and whether it moved.
    pub fn clip(self, mu: f64, eps: f64) -> (f64, bool) {
        let c = match self {
            LinkFunction::Identity => mu,
            LinkFunction::Logit => mu.clamp(eps, 1.0 - eps),
            LinkFunction::Log => mu.max(eps),
        };
        (c, c != mu)
    }
}

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn default_folds() -> usize {
    5
}

fn default_clip() -> f64 {
    1e-6
}

fn default_learner() -> LearnerSpec {
    LearnerSpec::forest(ForestParams::default(), 0)
}

/// Settings shared by both estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrOptions {
    pub link: LinkFunction,
    /// Learner for Ê[X|Û] (and the category propensities when X is one-hot).
    #[serde(default = "default_learner")]
    pub x_learner: LearnerSpec,
    /// Learner for Ê[Y|Û] (identity link) or Ê[Y|X,Û] (other links).
    #[serde(default = "default_learner")]
    pub y_learner: LearnerSpec,
    /// Learner for Ê[g(μ̂)|Û].
    #[serde(default = "default_learner")]
    pub outer_learner: LearnerSpec,
    /// 1 means fit and evaluate on the same rows (not inferential).
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default)]
    pub crossfit_seed: u64,
    #[serde(default = "default_clip")]
    pub mu_clip: f64,
    #[serde(default)]
    pub categorical_x: bool,
}

impl Default for DrOptions {
    fn default() -> Self {
        Self {
            link: LinkFunction::Identity,
            x_learner: default_learner(),
            y_learner: default_learner(),
            outer_learner: default_learner(),
            n_folds: default_folds(),
            crossfit_seed: 0,
            mu_clip: default_clip(),
            categorical_x: false,
        }
    }
}

impl DrOptions {
    /// All three nuisances fitted by least squares.
    pub fn ols(link: LinkFunction) -> Self {
        Self {
            link,
            x_learner: LearnerSpec::ols(),
            y_learner: LearnerSpec::ols(),
            outer_learner: LearnerSpec::ols(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(PiiError::Config("n_folds must be at least 1".into()));
        }
        if !(self.mu_clip > 0.0 && self.mu_clip < 0.5) {
            return Err(PiiError::Config(format!("mu_clip {} outside (0, 0.5)", self.mu_clip)));
        }
        self.x_learner.validate()?;
        self.y_learner.validate()?;
        self.outer_learner.validate()
    }

    pub fn plan(&self, n: usize) -> Result<CrossFitPlan> {
        if self.n_folds == 1 {
            Ok(CrossFitPlan::no_split(n))
        } else {
            CrossFitPlan::random(n, self.n_folds, self.crossfit_seed)
        }
    }
}

// separate streams for the nuisance roles even when their configured seeds match
fn for_role(spec: &LearnerSpec, role: u64) -> LearnerSpec {
    LearnerSpec {
        seed: rng::derive_seed(spec.seed, &[0x5EED_0000 + role]),
        ..spec.clone()
    }
}

/// A fit together with the pieces needed to evaluate its influence values.
#[derive(Debug, Clone)]
pub struct DrFit {
    pub result: FitResult,
    /// Treatment residuals X − Ê[X|Û] (n × d).
    pub rx: DMatrix<f64>,
    /// Per-outcome residuals of the final regression (n × p, zero on controls).
    pub resid: DMatrix<f64>,
    /// Number of mean predictions moved by clipping.
    pub n_clipped: usize,
}

impl DrFit {
    /// φ̃ for outcome `j`: row i is Rx_i · e_ij.
    pub fn influence_values(&self, j: usize) -> DMatrix<f64> {
        let mut phi = self.rx.clone();
        for (i, mut row) in phi.row_iter_mut().enumerate() {
            row *= self.resid[(i, j)];
        }
        phi
    }

    /// Largest absolute coordinate of the empirical mean of φ̃ over tested outcomes.
    pub fn max_influence_mean(&self) -> f64 {
        let n = self.rx.nrows() as f64;
        self.result
            .tested_indices()
            .into_iter()
            .flat_map(|j| {
                let e = self.resid.column(j);
                (0..self.rx.ncols())
                    .map(|k| (self.rx.column(k).dot(&e) / n).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

fn aligned(dataset: &Dataset, emb: &EmbeddingResult) -> Result<Dataset> {
    let ds = match &emb.rows {
        Some(rows) => dataset.subset_rows(rows)?,
        None => dataset.clone(),
    };
    if emb.u_hat.nrows() != ds.n() {
        return Err(PiiError::Dimension(format!(
            "embedding has {} rows, dataset {}",
            emb.u_hat.nrows(),
            ds.n()
        )));
    }
    Ok(ds)
}

fn check_size(ds: &Dataset, opts: &DrOptions) -> Result<()> {
    if ds.n() <= ds.d() + opts.n_folds {
        return Err(PiiError::Invalid(format!(
            "n={} must exceed d + n_folds = {}",
            ds.n(),
            ds.d() + opts.n_folds
        )));
    }
    Ok(())
}

/// Double-residual estimator under the identity link.
pub fn fit_linear(dataset: &Dataset, emb: &EmbeddingResult, opts: &DrOptions) -> Result<DrFit> {
    if opts.link != LinkFunction::Identity {
        return Err(PiiError::Config("fit_linear requires the identity link".into()));
    }
    opts.validate()?;
    let ds = aligned(dataset, emb)?;
    check_size(&ds, opts)?;
    let plan = opts.plan(ds.n())?;
    let u = &emb.u_hat;
    let rx = ds.x() - fit_predict_crossfit(u, ds.x(), &for_role(&opts.x_learner, 0), &plan)?;
    let yt = ds.y_tested();
    let ry = &yt - fit_predict_crossfit(u, &yt, &for_role(&opts.y_learner, 1), &plan)?;
    fit_from_residuals(&rx, &ry, &ds, 0)
}

/// Doubly robust estimator for a nonlinear link through the pseudo-outcome
/// η̂ = g′(μ̂)(Y − μ̂) + g(μ̂) − γ̂.
pub fn fit_glink(dataset: &Dataset, emb: &EmbeddingResult, opts: &DrOptions) -> Result<DrFit> {
    opts.validate()?;
    let ds = aligned(dataset, emb)?;
    check_size(&ds, opts)?;
    let plan = opts.plan(ds.n())?;
    let link = opts.link;
    let eps = opts.mu_clip;
    let u = &emb.u_hat;
    let x = ds.x();
    let yt = ds.y_tested();
    if link == LinkFunction::Logit && yt.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(PiiError::Invalid("logit link needs outcomes in [0, 1]".into()));
    }
    if link == LinkFunction::Log && yt.iter().any(|&v| v < 0.0) {
        return Err(PiiError::Invalid("log link needs nonnegative outcomes".into()));
    }

    let mx = fit_predict_crossfit(u, x, &for_role(&opts.x_learner, 0), &plan)?;
    let rx = x - &mx;
    let xu = linalg::hcat(x, u);
    let mu_model = fit_crossfit(&xu, &yt, &for_role(&opts.y_learner, 2), &plan)?;
    let mut n_clipped = 0;
    let mut clip_all = |m: DMatrix<f64>| {
        m.map(|v| {
            let (c, moved) = link.clip(v, eps);
            n_clipped += moved as usize;
            c
        })
    };
    let mu = clip_all(mu_model.predict(&xu));
    let gmu = mu.map(|v| link.g(v));

    let gamma = if opts.categorical_x {
        let levels = one_hot_levels(x)?;
        let n = ds.n();
        let d = ds.d();
        // π̂_k from the treatment regression, the reference level takes the rest
        let mut props: Vec<DVector<f64>> = Vec::with_capacity(levels.len());
        for lvl in &levels {
            props.push(DVector::from_fn(n, |i, _| match lvl {
                Some(k) => mx[(i, *k)],
                None => 1.0 - mx.row(i).sum(),
            }));
        }
        for i in 0..n {
            let mut total = 0.0;
            for p in props.iter_mut() {
                p[i] = p[i].clamp(eps, 1.0 - eps);
                total += p[i];
            }
            for p in props.iter_mut() {
                p[i] /= total;
            }
        }
        let mut gamma = DMatrix::zeros(n, yt.ncols());
        for (lvl, pi) in levels.iter().zip(&props) {
            let mut xs = DMatrix::zeros(n, d);
            if let Some(k) = lvl {
                xs.column_mut(*k).fill(1.0);
            }
            let g_at = clip_all(mu_model.predict(&linalg::hcat(&xs, u))).map(|v| link.g(v));
            for j in 0..yt.ncols() {
                for i in 0..n {
                    gamma[(i, j)] += g_at[(i, j)] * pi[i];
                }
            }
        }
        gamma
    } else {
        fit_predict_crossfit(u, &gmu, &for_role(&opts.outer_learner, 3), &plan)?
    };

    let eta = DMatrix::from_fn(ds.n(), yt.ncols(), |i, j| {
        let m = mu[(i, j)];
        link.g_prime(m) * (yt[(i, j)] - m) + gmu[(i, j)] - gamma[(i, j)]
    });
    fit_from_residuals(&rx, &eta, &ds, n_clipped)
}

/// Category present in a one-hot block: `Some(k)` for column k, `None` for
/// the all-zero reference row.
fn one_hot_levels(x: &DMatrix<f64>) -> Result<Vec<Option<usize>>> {
    let d = x.ncols();
    let mut seen = vec![false; d + 1];
    for row in x.row_iter() {
        let mut hot = None;
        for (k, &v) in row.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(PiiError::Invalid("categorical X row with several ones".into()));
                }
                hot = Some(k);
            } else if v != 0.0 {
                return Err(PiiError::Invalid(format!("categorical X entry {v} is not 0/1")));
            }
        }
        seen[hot.unwrap_or(d)] = true;
    }
    let mut levels: Vec<Option<usize>> = (0..d).filter(|&k| seen[k]).map(Some).collect();
    if seen[d] {
        levels.push(None);
    }
    Ok(levels)
}

/// Final stage shared by both estimators: no-intercept regression of each
/// tested pseudo-outcome column on `rx`, with sandwich covariance.
/// `targets` holds one column per tested outcome of `ds`, in order.
pub fn fit_from_residuals(rx: &DMatrix<f64>, targets: &DMatrix<f64>, ds: &Dataset, n_clipped: usize) -> Result<DrFit> {
    let (n, d) = rx.shape();
    let tested = ds.tested();
    assert_eq!(targets.ncols(), tested.len());
    assert_eq!(targets.nrows(), n);
    let nf = n as f64;
    let mut sigma = rx.transpose() * rx / nf;
    linalg::symmetrize(&mut sigma);
    let sigma_inv = linalg::spd_inverse(&sigma)
        .map_err(|_| PiiError::Singular("treatment residual second moment".into()))?;
    let coef = &sigma_inv * (rx.transpose() * targets) / nf;
    let resid_t = targets - rx * &coef;

    let per_outcome: Vec<(DMatrix<f64>, Vec<f64>, Vec<f64>)> = (0..tested.len())
        .into_par_iter()
        .map(|t| {
            let mut meat = DMatrix::zeros(d, d);
            for i in 0..n {
                let e2 = resid_t[(i, t)].powi(2);
                for a in 0..d {
                    let ra = rx[(i, a)] * e2;
                    for b in 0..=a {
                        meat[(a, b)] += ra * rx[(i, b)];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    meat[(b, a)] = meat[(a, b)];
                }
            }
            let mut cov = &sigma_inv * (meat / nf) * &sigma_inv / nf;
            linalg::symmetrize(&mut cov);
            let (ts, ps): (Vec<f64>, Vec<f64>) = (0..d).map(|k| wald(coef[(k, t)], cov[(k, k)])).unzip();
            (cov, ts, ps)
        })
        .collect();

    let p = ds.p();
    let mut beta_hat = DMatrix::zeros(d, p);
    let mut tstats = DMatrix::from_element(d, p, f64::NAN);
    let mut pvalues = DMatrix::from_element(d, p, f64::NAN);
    let mut cov_per_outcome = vec![DMatrix::zeros(d, d); p];
    let mut resid = DMatrix::zeros(n, p);
    let mut is_tested = vec![false; p];
    for (t, (&j, (cov, ts, ps))) in tested.iter().zip(per_outcome).enumerate() {
        is_tested[j] = true;
        for k in 0..d {
            beta_hat[(k, j)] = coef[(k, t)];
            tstats[(k, j)] = ts[k];
            pvalues[(k, j)] = ps[k];
        }
        cov_per_outcome[j] = cov;
        resid.set_column(j, &resid_t.column(t));
    }
    Ok(DrFit {
        result: FitResult {
            beta_hat,
            cov_per_outcome,
            sigma_hat: sigma,
            tstats,
            pvalues,
            tested: is_tested,
            n_used: n,
        },
        rx: rx.clone(),
        resid,
        n_clipped,
    })
}

/// Wald statistic and two-sided normal p-value for an estimate and its variance.
pub fn wald(est: f64, var: f64) -> (f64, f64) {
    let se = var.max(0.0).sqrt();
    let t = if se > 0.0 {
        est / se
    } else if est == 0.0 {
        0.0
    } else {
        est.signum() * f64::INFINITY
    };
    (t, two_sided_p(t))
}

pub fn two_sided_p(t: f64) -> f64 {
    erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Wald test of vᵀb̃_{·j} = 0 for a direction `v`.
pub fn directional_test(fit: &FitResult, j: usize, v: &DVector<f64>) -> Result<(f64, f64)> {
    if v.len() != fit.d() {
        return Err(PiiError::Dimension(format!("direction has {} entries, d={}", v.len(), fit.d())));
    }
    if !fit.is_tested(j) {
        return Err(PiiError::Invalid(format!("outcome {j} is a control")));
    }
    let est = v.dot(&fit.beta_hat.column(j));
    let var = (v.transpose() * &fit.cov_per_outcome[j] * v)[(0, 0)];
    Ok(wald(est, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::LearnerKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn zero_opts() -> DrOptions {
        DrOptions {
            x_learner: LearnerSpec::zero(),
            y_learner: LearnerSpec::zero(),
            outer_learner: LearnerSpec::zero(),
            n_folds: 1,
            ..DrOptions::default()
        }
    }

    fn dummy_u(n: usize) -> EmbeddingResult {
        EmbeddingResult::external(DMatrix::from_fn(n, 1, |i, _| i as f64)).unwrap()
    }

    fn gaussian(n: usize, d: usize, r: usize, p: usize, seed: u64) -> (Dataset, DMatrix<f64>) {
        let mut g = rng::stream(seed, &[]);
        let mut z = || g.sample::<f64, _>(StandardNormal);
        let u = DMatrix::from_fn(n, r, |_, _| z());
        let x = DMatrix::from_fn(n, d, |i, k| 0.5 * u[(i, k % r)] + z());
        let y = DMatrix::from_fn(n, p, |i, j| {
            0.7 * x[(i, 0)] * (j % 2) as f64 + u[(i, j % r)] - 0.3 * u[(i, (j + 1) % r)] + (1.0 + x[(i, 0)].abs()) * z()
        });
        (Dataset::new(x, y, [0], None).unwrap(), u)
    }

    #[test]
    fn logit_probes() {
        let l = LinkFunction::Logit;
        assert_eq!(l.g(0.5), 0.0);
        assert!((l.g_prime(0.5) - 4.0).abs() < 1e-15);
        assert!((l.g(0.25) + 3f64.ln()).abs() < 1e-15);
        assert!((l.g_prime(0.25) - 16.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for link in [LinkFunction::Identity, LinkFunction::Logit, LinkFunction::Log] {
            for k in 1..20 {
                let mu = k as f64 / 20.0;
                let h = 1e-6 * mu.min(1.0 - mu);
                let fd = (link.g(mu + h) - link.g(mu - h)) / (2.0 * h);
                let gp = link.g_prime(mu);
                assert!((fd - gp).abs() <= 1e-6 * gp.abs(), "{link:?} at {mu}");
                assert!((link.inverse(link.g(mu)) - mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_nuisances_reduce_to_plain_ols() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let y = DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 2.0, -2.0]);
        let ds = Dataset::new(x, y, [0], None).unwrap();
        let opts = DrOptions {
            n_folds: 1,
            ..zero_opts()
        };
        // n = 2 is below the size floor, so call the final stage directly
        let fit = fit_from_residuals(ds.x(), &ds.y_tested(), &ds, 0).unwrap();
        assert_eq!(fit.result.beta_hat[(0, 1)], 2.0);
        assert!(fit_linear(&ds, &dummy_u(2), &opts).is_err());
    }

    #[test]
    fn three_point_influence_by_hand() {
        // x = (1,2,3), y = (1,3,2): b = (1+6+6)/14 = 13/14
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, 3.0, 2.0]);
        let ds = Dataset::new(x.clone(), y, [0], None).unwrap();
        let fit = fit_from_residuals(ds.x(), &ds.y_tested(), &ds, 0).unwrap();
        let b = 13.0 / 14.0;
        assert!((fit.result.beta_hat[(0, 1)] - b).abs() < 1e-15);
        let phi = fit.influence_values(1);
        let yv = [1.0, 3.0, 2.0];
        for i in 0..3 {
            let xi = x[(i, 0)];
            assert!((phi[(i, 0)] - xi * (yv[i] - b * xi)).abs() < 1e-14);
        }
        // Σ̂ = 14/3, V = mean φ² ; cov = V / Σ̂² / n
        let v: f64 = (0..3).map(|i| phi[(i, 0)].powi(2)).sum::<f64>() / 3.0;
        let expect = v / (14.0f64 / 3.0).powi(2) / 3.0;
        assert!((fit.result.cov_per_outcome[1][(0, 0)] - expect).abs() < 1e-14);
        assert!(fit.max_influence_mean() < 1e-14);
    }

    #[test]
    fn matches_joint_least_squares_without_splitting() {
        let (ds, u) = gaussian(150, 2, 3, 6, 11);
        let fit = fit_linear(&ds, &EmbeddingResult::external(u.clone()).unwrap(), &DrOptions {
            n_folds: 1,
            ..DrOptions::ols(LinkFunction::Identity)
        })
        .unwrap();
        let design = linalg::prepend_ones(&linalg::hcat(ds.x(), &u));
        let gram = design.transpose() * &design;
        let joint = gram.clone().lu().solve(&(design.transpose() * ds.y())).unwrap();
        for j in ds.tested() {
            for k in 0..2 {
                assert!((joint[(k + 1, j)] - fit.result.beta_hat[(k, j)]).abs() < 1e-8);
            }
        }
        assert!(fit.max_influence_mean() < 1e-8);
    }

    #[test]
    fn controls_carry_sentinels() {
        let (ds, u) = gaussian(120, 1, 2, 4, 3);
        let fit = fit_linear(&ds, &EmbeddingResult::external(u).unwrap(), &DrOptions::ols(LinkFunction::Identity)).unwrap();
        let r = &fit.result;
        assert_eq!(r.beta_hat[(0, 0)], 0.0);
        assert!(r.pvalues[(0, 0)].is_nan() && r.tstats[(0, 0)].is_nan());
        for j in 1..4 {
            assert!((0.0..=1.0).contains(&r.pvalues[(0, j)]));
            let t = r.beta_hat[(0, j)] / r.cov_per_outcome[j][(0, 0)].sqrt();
            assert!((t - r.tstats[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_equivariance() {
        let (ds, u) = gaussian(120, 1, 2, 3, 5);
        let emb = EmbeddingResult::external(u).unwrap();
        let opts = DrOptions::ols(LinkFunction::Identity);
        let a = fit_linear(&ds, &emb, &opts).unwrap();
        let c = 3.5;
        let scaled = Dataset::new(ds.x().clone(), ds.y() * c, [0], None).unwrap();
        let b = fit_linear(&scaled, &emb, &opts).unwrap();
        for j in 1..3 {
            assert!((b.result.beta_hat[(0, j)] - c * a.result.beta_hat[(0, j)]).abs() < 1e-10);
            assert!((b.result.tstats[(0, j)] - a.result.tstats[(0, j)]).abs() < 1e-10);
            let (pa, pb) = (a.influence_values(j), b.influence_values(j));
            assert!((pb - pa * c).abs().max() < 1e-10);
        }
    }

    #[test]
    fn affine_reparameterization_of_embedding() {
        let (ds, u) = gaussian(140, 2, 3, 5, 9);
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.0, 0.2, -1.5]);
        let u2 = DMatrix::from_fn(140, 3, |i, k| (u.row(i) * &r)[k] + [1.0, -2.0, 0.5][k]);
        let opts = DrOptions::ols(LinkFunction::Identity);
        let a = fit_linear(&ds, &EmbeddingResult::external(u).unwrap(), &opts).unwrap().result;
        let b = fit_linear(&ds, &EmbeddingResult::external(u2).unwrap(), &opts).unwrap().result;
        assert!((&a.beta_hat - &b.beta_hat).abs().max() < 1e-8);
        assert!((&a.tstats.map(|v| if v.is_nan() { 0.0 } else { v }) - b.tstats.map(|v| if v.is_nan() { 0.0 } else { v })).abs().max() < 1e-8);
        for j in 1..5 {
            assert!((&a.cov_per_outcome[j] - &b.cov_per_outcome[j]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn identity_glink_equals_linear_without_splitting() {
        let (ds, u) = gaussian(100, 1, 2, 4, 21);
        let emb = EmbeddingResult::external(u).unwrap();
        let opts = DrOptions {
            n_folds: 1,
            ..DrOptions::ols(LinkFunction::Identity)
        };
        let a = fit_linear(&ds, &emb, &opts).unwrap().result;
        let b = fit_glink(&ds, &emb, &opts).unwrap().result;
        assert!((&a.beta_hat - &b.beta_hat).abs().max() < 1e-8);
        for j in 1..4 {
            assert!((&a.cov_per_outcome[j] - &b.cov_per_outcome[j]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn logit_glink_is_finite_and_orthogonal() {
        let n = 300;
        let mut g = rng::stream(4, &[]);
        let u = DMatrix::from_fn(n, 2, |_, _| g.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 1, |i, _| u[(i, 0)] * 0.5 + g.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 3, |i, j| {
            let z = 0.8 * x[(i, 0)] * (j == 2) as u8 as f64 + u[(i, 1)];
            (g.random::<f64>() < expit(z)) as u8 as f64
        });
        let ds = Dataset::new(x, y, [0], None).unwrap();
        let opts = DrOptions {
            link: LinkFunction::Logit,
            x_learner: LearnerSpec::ols(),
            y_learner: LearnerSpec::forest(ForestParams { n_trees: 10, max_depth: Some(3), ..ForestParams::default() }, 1),
            outer_learner: LearnerSpec::ols(),
            ..DrOptions::default()
        };
        let fit = fit_glink(&ds, &EmbeddingResult::external(u).unwrap(), &opts).unwrap();
        assert!(fit.result.beta_hat.iter().all(|v| v.is_finite()));
        assert!(fit.max_influence_mean() < 1e-8);
    }

    #[test]
    fn categorical_propensities_sum_to_one() {
        let n = 240;
        let mut g = rng::stream(6, &[]);
        let u = DMatrix::from_fn(n, 1, |_, _| g.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 2, |i, k| ((i % 3) == k) as u8 as f64);
        let y = DMatrix::from_fn(n, 2, |i, _| (g.random::<f64>() < expit(u[(i, 0)] + x[(i, 0)])) as u8 as f64);
        let ds = Dataset::new(x, y, [0], None).unwrap();
        let opts = DrOptions {
            link: LinkFunction::Logit,
            categorical_x: true,
            ..DrOptions::ols(LinkFunction::Logit)
        };
        let fit = fit_glink(&ds, &EmbeddingResult::external(u).unwrap(), &opts).unwrap();
        assert!(fit.result.beta_hat.iter().all(|v| v.is_finite()));
        assert_eq!(one_hot_levels(ds.x()).unwrap(), vec![Some(0), Some(1), None]);
    }

    #[test]
    fn directional_default_matches_coordinate_test() {
        let (ds, u) = gaussian(120, 2, 2, 3, 8);
        let fit = fit_linear(&ds, &EmbeddingResult::external(u).unwrap(), &DrOptions::ols(LinkFunction::Identity)).unwrap().result;
        let e1 = DVector::from_vec(vec![0.0, 1.0]);
        let (t, p) = directional_test(&fit, 2, &e1).unwrap();
        assert!((t - fit.tstats[(1, 2)]).abs() < 1e-12);
        assert!((p - fit.pvalues[(1, 2)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_link_and_bad_options() {
        let (ds, u) = gaussian(50, 1, 1, 2, 1);
        let emb = EmbeddingResult::external(u).unwrap();
        assert!(fit_linear(&ds, &emb, &DrOptions::ols(LinkFunction::Logit)).is_err());
        let bad = DrOptions {
            mu_clip: 0.7,
            ..DrOptions::ols(LinkFunction::Identity)
        };
        assert!(matches!(fit_linear(&ds, &emb, &bad), Err(PiiError::Config(_))));
        let knn = DrOptions {
            x_learner: LearnerSpec::new(LearnerKind::Knn { k: 3 }, 0),
            ..DrOptions::ols(LinkFunction::Identity)
        };
        assert!(fit_linear(&ds, &emb, &knn).is_ok());
    }
}
