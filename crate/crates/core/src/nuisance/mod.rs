//! Regression learners for nuisance functions and the cross-fitting
//! machinery that keeps nuisance fits independent of the rows they score.

pub mod forest;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiiError, Result};
use crate::linalg;
use crate::rng;
pub use forest::{ForestModel, ForestParams, MTry, MTryKeyword};

/// Which regression model to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerKind {
    /// Predicts 0 everywhere.
    Zero,
    /// Least squares on `[1, features]`.
    Ols,
    /// Ridge on `[1, features]` with an unpenalized intercept.
    Ridge { lambda: f64 },
    /// Mean of the `k` nearest training rows (Euclidean, ties by row index).
    Knn { k: usize },
    RandomForest {
        #[serde(flatten)]
        params: ForestParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub model: LearnerKind,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(model: LearnerKind, seed: u64) -> Self {
        Self { model, seed }
    }

    pub fn ols() -> Self {
        Self::new(LearnerKind::Ols, 0)
    }

    pub fn zero() -> Self {
        Self::new(LearnerKind::Zero, 0)
    }

    pub fn forest(params: ForestParams, seed: u64) -> Self {
        Self::new(LearnerKind::RandomForest { params }, seed)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            LearnerKind::Ridge { lambda } if !(*lambda >= 0.0) => {
                Err(PiiError::Config(format!("ridge lambda {lambda} must be nonnegative")))
            }
            LearnerKind::Knn { k: 0 } => Err(PiiError::Config("knn k must be positive".into())),
            LearnerKind::RandomForest { params } => params.validate(),
            _ => Ok(()),
        }
    }

    fn min_train_rows(&self) -> usize {
        match &self.model {
            LearnerKind::Knn { k } => (*k).max(2),
            _ => 2,
        }
    }
}

/// A fitted learner for one or more target columns.
#[derive(Debug, Clone)]
pub enum FittedLearner {
    Zero { n_targets: usize },
    /// Coefficients on `[1, features]`, one column per target.
    Linear { coef: DMatrix<f64> },
    Knn {
        k: usize,
        train_x: DMatrix<f64>,
        train_y: DMatrix<f64>,
    },
    Forest(Vec<ForestModel>),
}

impl FittedLearner {
    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FittedLearner::Zero { n_targets } => DMatrix::zeros(features.nrows(), *n_targets),
            FittedLearner::Linear { coef } => linalg::prepend_ones(features) * coef,
            FittedLearner::Knn { k, train_x, train_y } => knn_predict(*k, train_x, train_y, features),
            FittedLearner::Forest(models) => {
                let mut out = DMatrix::zeros(features.nrows(), models.len());
                for (j, m) in models.iter().enumerate() {
                    out.set_column(j, &nalgebra::DVector::from_vec(m.predict(features)));
                }
                out
            }
        }
    }
}

/// Fit `spec` on all given rows. `unit` distinguishes independent fits
/// (for example folds) that share a seed.
pub fn fit_learner(spec: &LearnerSpec, features: &DMatrix<f64>, targets: &DMatrix<f64>, unit: u64) -> Result<FittedLearner> {
    spec.validate()?;
    let n = features.nrows();
    if targets.nrows() != n {
        return Err(PiiError::Dimension(format!(
            "{n} feature rows but {} target rows",
            targets.nrows()
        )));
    }
    match &spec.model {
        LearnerKind::Zero => Ok(FittedLearner::Zero {
            n_targets: targets.ncols(),
        }),
        LearnerKind::Ols => fit_ols(features, targets),
        LearnerKind::Ridge { lambda } => {
            if *lambda == 0.0 {
                fit_ols(features, targets)
            } else {
                fit_ridge(features, targets, *lambda)
            }
        }
        LearnerKind::Knn { k } => {
            if n < *k {
                return Err(PiiError::FoldTooSmall {
                    fold: unit as usize,
                    size: n,
                    needed: *k,
                });
            }
            Ok(FittedLearner::Knn {
                k: *k,
                train_x: features.clone(),
                train_y: targets.clone(),
            })
        }
        LearnerKind::RandomForest { params } => {
            let seeds: Vec<u64> = (0..targets.ncols())
                .map(|j| rng::derive_seed(spec.seed, &[unit, j as u64]))
                .collect();
            Ok(FittedLearner::Forest(forest::rf_fit_many(features, targets, params, &seeds)?))
        }
    }
}

fn fit_ols(features: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<FittedLearner> {
    let design = linalg::prepend_ones(features);
    match linalg::lstsq(&design, targets) {
        Ok(coef) => Ok(FittedLearner::Linear { coef }),
        Err(PiiError::RankDeficient(_)) => {
            // numerically singular Gram: tiny ridge relative to its trace
            let gram = design.transpose() * &design;
            let lambda = 1e-10 * gram.trace() / design.ncols() as f64;
            let mut reg = gram;
            for i in 1..reg.nrows() {
                reg[(i, i)] += lambda;
            }
            if reg.nrows() == 1 || lambda == 0.0 {
                reg[(0, 0)] += lambda.max(f64::MIN_POSITIVE);
            }
            let chol = reg
                .cholesky()
                .ok_or_else(|| PiiError::Singular("ols Gram matrix beyond ridge fallback".into()))?;
            Ok(FittedLearner::Linear {
                coef: chol.solve(&(design.transpose() * targets)),
            })
        }
        Err(e) => Err(e),
    }
}

fn fit_ridge(features: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<FittedLearner> {
    let q = features.ncols();
    let fmean = linalg::column_means(features);
    let tmean = linalg::column_means(targets);
    let fc = DMatrix::from_fn(features.nrows(), q, |i, j| features[(i, j)] - fmean[j]);
    let tc = DMatrix::from_fn(targets.nrows(), targets.ncols(), |i, j| targets[(i, j)] - tmean[j]);
    let mut gram = fc.transpose() * &fc;
    for i in 0..q {
        gram[(i, i)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| PiiError::Singular("ridge system".into()))?;
    let slopes = chol.solve(&(fc.transpose() * tc));
    let mut coef = DMatrix::zeros(q + 1, targets.ncols());
    for t in 0..targets.ncols() {
        let icpt = tmean[t] - (0..q).map(|k| fmean[k] * slopes[(k, t)]).sum::<f64>();
        coef[(0, t)] = icpt;
        for k in 0..q {
            coef[(k + 1, t)] = slopes[(k, t)];
        }
    }
    Ok(FittedLearner::Linear { coef })
}

fn knn_predict(k: usize, train_x: &DMatrix<f64>, train_y: &DMatrix<f64>, features: &DMatrix<f64>) -> DMatrix<f64> {
    let n = train_x.nrows();
    let s = train_y.ncols();
    let mut out = DMatrix::zeros(features.nrows(), s);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..features.nrows() {
        dist.clear();
        for r in 0..n {
            let d2: f64 = (0..train_x.ncols())
                .map(|f| (features[(i, f)] - train_x[(r, f)]).powi(2))
                .sum();
            dist.push((d2, r));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut dist[..k];
        nearest.sort_by(cmp);
        for t in 0..s {
            out[(i, t)] = nearest.iter().map(|&(_, r)| train_y[(r, t)]).sum::<f64>() / k as f64;
        }
    }
    out
}

/// Assignment of rows to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n_folds: usize,
    pub fold_assignment: Vec<usize>,
    pub seed: u64,
}

impl CrossFitPlan {
    /// Seeded uniform permutation cut into `k` nearly equal blocks.
    pub fn random(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(PiiError::Config(format!("cross-fitting needs at least 2 folds, got {k}")));
        }
        if n < k {
            return Err(PiiError::Invalid(format!("{n} rows cannot fill {k} folds")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[0xC5F0]));
        let mut fold_assignment = vec![0; n];
        for (pos, &row) in perm.iter().enumerate() {
            fold_assignment[row] = pos * k / n;
        }
        Ok(Self {
            n_folds: k,
            fold_assignment,
            seed,
        })
    }

    /// Fit and evaluate on the same rows. Not valid for inference; exists
    /// for algebraic identity checks.
    pub fn no_split(n: usize) -> Self {
        Self {
            n_folds: 1,
            fold_assignment: vec![0; n],
            seed: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.fold_assignment.len()
    }

    pub fn is_inferential(&self) -> bool {
        self.n_folds >= 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(PiiError::Config("zero folds".into()));
        }
        let mut sizes = vec![0usize; self.n_folds];
        for &f in &self.fold_assignment {
            *sizes
                .get_mut(f)
                .ok_or_else(|| PiiError::Invalid(format!("fold id {f} out of range")))? += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(PiiError::Invalid(format!("fold {k} is empty")));
        }
        Ok(())
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_assignment[i] == fold).collect()
    }

    /// Rows used to train the model that scores `fold`.
    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        if self.n_folds == 1 {
            return (0..self.n()).collect();
        }
        (0..self.n()).filter(|&i| self.fold_assignment[i] != fold).collect()
    }
}

/// One fitted model per fold.
#[derive(Debug, Clone)]
pub struct CrossFitted {
    pub models: Vec<FittedLearner>,
    pub plan: CrossFitPlan,
}

impl CrossFitted {
    /// Out-of-fold prediction: row i is scored by the model of its own fold,
    /// which never saw row i (unless the plan is `no_split`).
    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(features.nrows(), self.plan.n(), "features must align with the plan");
        let mut out: Option<DMatrix<f64>> = None;
        for (fold, model) in self.models.iter().enumerate() {
            let rows = self.plan.fold_rows(fold);
            let pred = model.predict(&linalg::select_rows(features, &rows));
            let out = out.get_or_insert_with(|| DMatrix::zeros(features.nrows(), pred.ncols()));
            for (k, &i) in rows.iter().enumerate() {
                out.set_row(i, &pred.row(k));
            }
        }
        out.expect("plan has at least one fold")
    }
}

/// Fit one model per fold on the complementary rows.
pub fn fit_crossfit(features: &DMatrix<f64>, targets: &DMatrix<f64>, spec: &LearnerSpec, plan: &CrossFitPlan) -> Result<CrossFitted> {
    plan.validate()?;
    if features.nrows() != plan.n() || targets.nrows() != plan.n() {
        return Err(PiiError::Dimension(format!(
            "plan covers {} rows, features {} and targets {}",
            plan.n(),
            features.nrows(),
            targets.nrows()
        )));
    }
    let needed = spec.min_train_rows();
    let models = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let rows = plan.train_rows(fold);
            if rows.len() < needed {
                return Err(PiiError::FoldTooSmall {
                    fold,
                    size: rows.len(),
                    needed,
                });
            }
            fit_learner(
                spec,
                &linalg::select_rows(features, &rows),
                &linalg::select_rows(targets, &rows),
                fold as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossFitted {
        models,
        plan: plan.clone(),
    })
}

/// Out-of-fold predictions (n × s).
pub fn fit_predict_crossfit(features: &DMatrix<f64>, targets: &DMatrix<f64>, spec: &LearnerSpec, plan: &CrossFitPlan) -> Result<DMatrix<f64>> {
    Ok(fit_crossfit(features, targets, spec, plan)?.predict(features))
}

/// Outcome of a grid search.
#[derive(Debug, Clone)]
pub struct GridSelection {
    pub best: LearnerSpec,
    pub best_index: usize,
    /// Cross-validated MSE per grid cell; `Err` holds the failure message.
    pub scores: Vec<std::result::Result<f64, String>>,
}

/// Pick the grid cell with the smallest cross-validated mean squared error
/// (averaged over target columns); ties go to the earlier cell.
pub fn grid_select(features: &DMatrix<f64>, targets: &DMatrix<f64>, grid: &[LearnerSpec], plan: &CrossFitPlan) -> Result<GridSelection> {
    if grid.is_empty() {
        return Err(PiiError::Config("empty learner grid".into()));
    }
    let scores: Vec<std::result::Result<f64, String>> = grid
        .iter()
        .map(|spec| {
            fit_predict_crossfit(features, targets, spec, plan)
                .map(|pred| cv_mse(&pred, targets))
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Ok(v) = s {
            if v.is_finite() && best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    let (best_index, _) = best.ok_or_else(|| PiiError::Numerical("every grid cell failed".into()))?;
    Ok(GridSelection {
        best: grid[best_index].clone(),
        best_index,
        scores,
    })
}

/// Mean over target columns of the mean squared prediction error.
pub fn cv_mse(pred: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let n = targets.nrows() as f64;
    let per_col: f64 = (0..targets.ncols())
        .map(|j| (0..targets.nrows()).map(|i| (pred[(i, j)] - targets[(i, j)]).powi(2)).sum::<f64>() / n)
        .sum();
    per_col / targets.ncols() as f64
}
