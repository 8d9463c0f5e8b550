//! Hold-out convergence of nuisance learners against analytic regression
//! functions, summarized by a log-log slope over sample sizes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Estimate;
use crate::dr::expit;
use crate::error::{PiiError, Result};
use crate::linalg;
use crate::nuisance::{fit_learner, grid_select, CrossFitPlan, LearnerSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateDgp {
    /// Target = U·a + noise, U ~ N(0, I_r), a ~ Unif(−1, 1).
    Linear { r: usize, noise_sd: f64 },
    /// The logistic partial linear design: nuisances E[X|U] and E[Y_j|X,U].
    PartialLinear {
        r: usize,
        sigma_eps: f64,
        effect_size: f64,
        n_outcomes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub n_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    pub dgp: RateDgp,
    /// Fixed learner; exactly one of `learner` and `grid` is given.
    pub learner: Option<LearnerSpec>,
    /// Candidates tuned by K-fold CV separately for every training set.
    #[serde(default)]
    pub grid: Vec<LearnerSpec>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_test() -> usize {
    1000
}

fn default_cv_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub nuisance: String,
    /// Hold-out L2 error, mean and MC standard error over replications.
    pub l2: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Slope of log mean error on log n; `None` when the grid has one size.
    pub slopes: BTreeMap<String, Option<f64>>,
}

/// One draw of the regression problem: training pairs, test features and
/// the regression function evaluated at them.
struct Problem {
    train_features: DMatrix<f64>,
    train_targets: DMatrix<f64>,
    test_features: DMatrix<f64>,
    test_truth: DMatrix<f64>,
}

const ROLE_PARAMS: u64 = 1;
const ROLE_TRAIN: u64 = 2;
const ROLE_TEST: u64 = 3;

fn l2(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    // mean over targets of the root mean squared error
    let n = truth.nrows() as f64;
    let k = truth.ncols() as f64;
    (0..truth.ncols())
        .map(|j| ((pred.column(j) - truth.column(j)).norm_squared() / n).sqrt())
        .sum::<f64>()
        / k
}

impl RateDgp {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            RateDgp::Linear { r, noise_sd } => r > 0 && noise_sd >= 0.0,
            RateDgp::PartialLinear {
                r,
                sigma_eps,
                effect_size,
                n_outcomes,
            } => r > 0 && sigma_eps > 0.0 && effect_size.is_finite() && n_outcomes > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(PiiError::Config(format!("invalid rate design {self:?}")))
        }
    }

    fn nuisances(&self) -> Vec<&'static str> {
        match self {
            RateDgp::Linear { .. } => vec!["regression"],
            RateDgp::PartialLinear { .. } => vec!["e_x_given_u", "e_y_given_xu"],
        }
    }

    fn problems(&self, n: usize, n_test: usize, seed: u64, rep: usize) -> Vec<Problem> {
        let key = |role: u64, extra: u64| rng::stream(seed, &[rep as u64, role, extra]);
        let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        match *self {
            RateDgp::Linear { r, noise_sd } => {
                let mut g = key(ROLE_PARAMS, 0);
                let a = DMatrix::from_fn(r, 1, |_, _| g.sample(unif));
                let mut g = key(ROLE_TRAIN, n as u64);
                let u = DMatrix::from_fn(n, r, |_, _| g.sample::<f64, _>(StandardNormal));
                let y = &u * &a + DMatrix::from_fn(n, 1, |_, _| noise_sd * g.sample::<f64, _>(StandardNormal));
                let mut g = key(ROLE_TEST, 0);
                let ut = DMatrix::from_fn(n_test, r, |_, _| g.sample::<f64, _>(StandardNormal));
                let truth = &ut * &a;
                vec![Problem {
                    train_features: u,
                    train_targets: y,
                    test_features: ut,
                    test_truth: truth,
                }]
            }
            RateDgp::PartialLinear {
                r,
                sigma_eps,
                effect_size,
                n_outcomes,
            } => {
                let eps = Normal::new(0.0, sigma_eps).expect("validated scale");
                let mut g = key(ROLE_PARAMS, 0);
                let alpha = DMatrix::from_fn(1, r, |_, _| g.sample(unif));
                let beta = DMatrix::from_element(1, n_outcomes, effect_size);
                let scale = 1.0 / (r as f64).sqrt();
                let eta = DMatrix::from_fn(r, n_outcomes, |_, _| g.sample(unif) * scale);
                let draw = |g: &mut rand_chacha::ChaCha8Rng, m: usize| {
                    let x = DMatrix::from_fn(m, 1, |_, _| g.sample::<f64, _>(StandardNormal));
                    let u = &x * &alpha + DMatrix::from_fn(m, r, |_, _| g.sample(eps));
                    (x, u)
                };
                let mut g = key(ROLE_TRAIN, n as u64);
                let (x, u) = draw(&mut g, n);
                let z = &x * &beta + &u * &eta;
                let y = z.map(|v| (g.random::<f64>() < expit(v)) as u8 as f64);
                let mut g = key(ROLE_TEST, 0);
                let (xt, ut) = draw(&mut g, n_test);
                // (X, U) jointly Gaussian: E[X|U] = U αᵀ / (σ² + ‖α‖²)
                let mx = &ut * alpha.transpose() / (sigma_eps * sigma_eps + alpha.norm_squared());
                let mu = (&xt * &beta + &ut * &eta).map(expit);
                vec![
                    Problem {
                        train_features: u.clone(),
                        train_targets: x.clone(),
                        test_features: ut.clone(),
                        test_truth: mx,
                    },
                    Problem {
                        train_features: linalg::hcat(&x, &u),
                        train_targets: y,
                        test_features: linalg::hcat(&xt, &ut),
                        test_truth: mu,
                    },
                ]
            }
        }
    }
}

pub fn nuisance_rate_study(cfg: &RateConfig) -> Result<RateReport> {
    cfg.dgp.validate()?;
    let candidates: Vec<&LearnerSpec> = match (&cfg.learner, cfg.grid.is_empty()) {
        (Some(l), true) => vec![l],
        (None, false) => cfg.grid.iter().collect(),
        _ => return Err(PiiError::Config("rate study needs exactly one of `learner` and `grid`".into())),
    };
    for c in &candidates {
        c.validate()?;
    }
    if cfg.n_grid.is_empty() || cfg.replications == 0 || cfg.n_test == 0 {
        return Err(PiiError::Config("n_grid, replications and n_test must be nonempty".into()));
    }
    if cfg.n_grid.iter().any(|&n| n < 2) {
        return Err(PiiError::Config("every training size must be at least 2".into()));
    }
    let names = cfg.dgp.nuisances();
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |rep| (n, rep)))
        .collect();
    let errors: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(n, rep)| {
            let seeded: Vec<LearnerSpec> = candidates
                .iter()
                .map(|c| LearnerSpec {
                    seed: rng::derive_seed(c.seed, &[cfg.seed, rep as u64, n as u64]),
                    ..(*c).clone()
                })
                .collect();
            cfg.dgp
                .problems(n, cfg.n_test, cfg.seed, rep)
                .iter()
                .enumerate()
                .map(|(k, pb)| {
                    let spec = if seeded.len() == 1 {
                        seeded[0].clone()
                    } else {
                        let plan = CrossFitPlan::random(n, cfg.cv_folds, rng::derive_seed(cfg.seed, &[rep as u64, n as u64, k as u64]))?;
                        grid_select(&pb.train_features, &pb.train_targets, &seeded, &plan)?.best
                    };
                    let model = fit_learner(&spec, &pb.train_features, &pb.train_targets, k as u64)?;
                    Ok(l2(&model.predict(&pb.test_features), &pb.test_truth))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut slopes = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let mut log_n = Vec::new();
        let mut log_e = Vec::new();
        for &n in &cfg.n_grid {
            let vals: Vec<f64> = cells
                .iter()
                .zip(&errors)
                .filter(|((m, _), _)| *m == n)
                .map(|(_, e)| e[k])
                .collect();
            let l2 = Estimate::of(&vals).expect("replications > 0");
            log_n.push((n as f64).ln());
            log_e.push(l2.mean.ln());
            rows.push(RateRow {
                n,
                nuisance: name.to_string(),
                l2,
            });
        }
        let distinct = log_n.iter().any(|&v| v != log_n[0]);
        slopes.insert(name.to_string(), distinct.then(|| linalg::ols_slope(&log_n, &log_e)));
    }
    Ok(RateReport { rows, slopes })
}
