//! Data generators and the Monte Carlo experiment runner.

pub mod glm;
pub mod rate;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, EmbeddingResult};
use crate::diagnostics::affine_projection_gap;
use crate::dr::{expit, fit_glink, fit_linear, two_sided_p, DrOptions, LinkFunction};
use crate::embedding::{embed, EmbedConfig};
use crate::error::{PiiError, Result};
use crate::linalg;
use crate::rng;
use crate::testing::TestReport;

// stream roles
const ROLE_X: u64 = 1;
const ROLE_ALPHA: u64 = 2;
const ROLE_EPS: u64 = 3;
const ROLE_BETA: u64 = 4;
const ROLE_ETA: u64 = 5;
const ROLE_Y: u64 = 6;
const ROLE_CONTAM: u64 = 7;
const ROLE_LEARNERS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-outcome regression on X alone.
    GlmNaive,
    /// Per-outcome regression on (X, U) with the true U.
    GlmOracle,
    /// Doubly robust fit with the true U as embedding.
    PiiTrueU,
    /// Doubly robust fit with an embedding estimated from the declared controls.
    PiiEstU,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GlmNaive => "glm_naive",
            Method::GlmOracle => "glm_oracle",
            Method::PiiTrueU => "pii_true_u",
            Method::PiiEstU => "pii_est_u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimLink {
    Logit,
    Identity,
}

impl SimLink {
    pub fn link(self) -> LinkFunction {
        match self {
            SimLink::Logit => LinkFunction::Logit,
            SimLink::Identity => LinkFunction::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSelection {
    /// Declared controls are true nulls (before any contamination).
    Oracle,
    /// The n_controls outcomes with the smallest |Wald| in a naive fit on X.
    LeastVariable,
}

/// Outcome columns the `pii_est_u` embedding is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedSource {
    /// The declared control set.
    #[default]
    Controls,
    /// Every outcome column, controls and tested alike.
    AllOutcomes,
}

fn d_r() -> usize {
    10
}
fn d_one() -> f64 {
    1.0
}
fn d_prob() -> f64 {
    0.2
}
fn d_effect() -> f64 {
    2.0
}
fn d_link() -> SimLink {
    SimLink::Logit
}
fn d_selection() -> ControlSelection {
    ControlSelection::Oracle
}
fn d_level() -> f64 {
    0.05
}
fn d_methods() -> Vec<Method> {
    vec![Method::GlmNaive, Method::GlmOracle, Method::PiiTrueU, Method::PiiEstU]
}

/// Full parameterization of a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    #[serde(default = "d_r")]
    pub r: usize,
    pub n_controls: usize,
    #[serde(default = "d_one")]
    pub sigma_eps: f64,
    #[serde(default = "d_prob")]
    pub nonnull_prob: f64,
    #[serde(default = "d_effect")]
    pub effect_size: f64,
    #[serde(default = "d_link")]
    pub link: SimLink,
    /// Fraction of declared controls replaced by non-null outcomes.
    #[serde(default)]
    pub contamination: f64,
    #[serde(default = "d_selection")]
    pub control_selection: ControlSelection,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    /// Embedding recipe for `pii_est_u`; defaults to PCA of rank `r`.
    #[serde(default)]
    pub embed: Option<EmbedConfig>,
    #[serde(default)]
    pub embed_source: EmbedSource,
    /// Nuisance settings for the doubly robust methods. The link is taken
    /// from `link`; learner seeds are re-derived per replication.
    #[serde(default)]
    pub learners: DrOptions,
    #[serde(default = "d_level")]
    pub alpha: f64,
    #[serde(default = "d_level")]
    pub q_fdr: f64,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    /// Desk-scale version of the logistic design: p = 200 with 100 controls.
    pub fn desk(n: usize, replications: usize, seed: u64) -> Self {
        Self {
            n,
            p: 200,
            r: 10,
            n_controls: 100,
            sigma_eps: 1.0,
            nonnull_prob: 0.2,
            effect_size: 2.0,
            link: SimLink::Logit,
            contamination: 0.0,
            control_selection: ControlSelection::Oracle,
            methods: d_methods(),
            embed: None,
            embed_source: EmbedSource::Controls,
            learners: DrOptions::default(),
            alpha: 0.05,
            q_fdr: 0.05,
            replications,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PiiError::Config(m));
        if self.n < 2 || self.p == 0 || self.r == 0 || self.replications == 0 {
            return bad("n ≥ 2, p, r and replications must be positive".into());
        }
        if self.n_controls >= self.p {
            return bad(format!("n_controls {} must be below p {}", self.n_controls, self.p));
        }
        if !(self.sigma_eps > 0.0) {
            return bad("sigma_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.nonnull_prob) || !(0.0..=1.0).contains(&self.contamination) {
            return bad("nonnull_prob and contamination must lie in [0, 1]".into());
        }
        if !self.effect_size.is_finite() {
            return bad("effect_size must be finite".into());
        }
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.q_fdr > 0.0 && self.q_fdr < 1.0) {
            return bad("alpha and q_fdr must lie in (0, 1)".into());
        }
        self.embed_config().validate()?;
        self.learners.validate()
    }

    pub fn embed_config(&self) -> EmbedConfig {
        self.embed.clone().unwrap_or_else(|| EmbedConfig::pca(self.r))
    }

    /// Nuisance options for replication `rep`.
    pub fn dr_options(&self, rep: usize) -> DrOptions {
        let mut o = self.learners.clone();
        o.link = self.link.link();
        let key = [self.seed, rep as u64, ROLE_LEARNERS];
        for spec in [&mut o.x_learner, &mut o.y_learner, &mut o.outer_learner] {
            spec.seed = rng::derive_seed(spec.seed, &key);
        }
        o.crossfit_seed = rng::derive_seed(o.crossfit_seed, &key);
        o
    }
}

/// One generated replication with its ground truth.
#[derive(Debug, Clone)]
pub struct SimInstance {
    /// Declared controls are the true-null controls before misspecification.
    pub dataset: Dataset,
    pub u: DMatrix<f64>,
    /// d × p
    pub beta: DMatrix<f64>,
    /// r × p
    pub eta: DMatrix<f64>,
    pub nonnull: Vec<bool>,
}

fn stream(seed: u64, rep: usize, role: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[rep as u64, role])
}

fn first_nulls(nonnull: &[bool], k: usize) -> Result<Vec<usize>> {
    let nulls: Vec<usize> = (0..nonnull.len()).filter(|&j| !nonnull[j]).take(k).collect();
    if nulls.len() < k {
        return Err(PiiError::Invalid(format!(
            "only {} null outcomes available for {k} controls",
            nulls.len()
        )));
    }
    Ok(nulls)
}

/// Generalized partial linear design with d = 1:
/// X ~ N(0,1), U = Xα + ε, link(E[Y|X,U]) = Xβ + Uη.
pub fn gen_partial_linear(cfg: &SimConfig, rep: usize) -> Result<SimInstance> {
    let (n, p, r) = (cfg.n, cfg.p, cfg.r);
    let seed = cfg.seed;
    let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut g = stream(seed, rep, ROLE_X);
    let x = DMatrix::from_fn(n, 1, |_, _| g.sample::<f64, _>(StandardNormal));
    let mut g = stream(seed, rep, ROLE_ALPHA);
    let alpha = DMatrix::from_fn(1, r, |_, _| g.sample(unif));
    let eps_dist = Normal::new(0.0, cfg.sigma_eps).map_err(|e| PiiError::Config(e.to_string()))?;
    let mut g = stream(seed, rep, ROLE_EPS);
    let eps = DMatrix::from_fn(n, r, |_, _| g.sample(eps_dist));
    let u = &x * &alpha + eps;
    let mut g = stream(seed, rep, ROLE_BETA);
    let nonnull: Vec<bool> = (0..p).map(|_| g.random::<f64>() < cfg.nonnull_prob).collect();
    let beta = DMatrix::from_fn(1, p, |_, j| if nonnull[j] { cfg.effect_size } else { 0.0 });
    let mut g = stream(seed, rep, ROLE_ETA);
    let scale = 1.0 / (r as f64).sqrt();
    let eta = DMatrix::from_fn(r, p, |_, _| g.sample(unif) * scale);
    let y = gen_outcomes(cfg, rep, &x, &u, &beta, &eta);
    let controls = first_nulls(&nonnull, cfg.n_controls)?;
    Ok(SimInstance {
        dataset: Dataset::new(x, y, controls, None)?,
        u,
        beta,
        eta,
        nonnull,
    })
}

/// Outcomes given stored covariates, embedding and coefficients.
pub fn gen_outcomes(cfg: &SimConfig, rep: usize, x: &DMatrix<f64>, u: &DMatrix<f64>, beta: &DMatrix<f64>, eta: &DMatrix<f64>) -> DMatrix<f64> {
    let z = x * beta + u * eta;
    let mut g = stream(cfg.seed, rep, ROLE_Y);
    // column-major fill: one outcome at a time
    let mut y = DMatrix::zeros(z.nrows(), z.ncols());
    for j in 0..z.ncols() {
        for i in 0..z.nrows() {
            y[(i, j)] = match cfg.link {
                SimLink::Logit => (g.random::<f64>() < expit(z[(i, j)])) as u8 as f64,
                SimLink::Identity => z[(i, j)] + g.sample::<f64, _>(StandardNormal),
            };
        }
    }
    y
}

/// Linear Gaussian design: U ~ N(0, I_r), X = c·U·A + N(0, 1),
/// Y = Xβ + Uη + σ·N(0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussian {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub p: usize,
    pub n_controls: usize,
    pub nonnull_prob: f64,
    pub effect_size: f64,
    /// Scale c of the dependence of X on U (0 makes them independent).
    pub confounding: f64,
    pub noise_sd: f64,
}

impl LinearGaussian {
    pub fn generate(&self, seed: u64, rep: usize) -> Result<SimInstance> {
        let (n, d, r, p) = (self.n, self.d, self.r, self.p);
        let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let mut g = stream(seed, rep, ROLE_EPS);
        let u = DMatrix::from_fn(n, r, |_, _| g.sample::<f64, _>(StandardNormal));
        let mut g = stream(seed, rep, ROLE_ALPHA);
        let a = DMatrix::from_fn(r, d, |_, _| g.sample(unif) * self.confounding);
        let mut g = stream(seed, rep, ROLE_X);
        let x = &u * a + DMatrix::from_fn(n, d, |_, _| g.sample::<f64, _>(StandardNormal));
        let mut g = stream(seed, rep, ROLE_BETA);
        let nonnull: Vec<bool> = (0..p).map(|_| g.random::<f64>() < self.nonnull_prob).collect();
        let beta = DMatrix::from_fn(d, p, |_, j| if nonnull[j] { self.effect_size } else { 0.0 });
        let mut g = stream(seed, rep, ROLE_ETA);
        let scale = 1.0 / (r as f64).sqrt();
        let eta = DMatrix::from_fn(r, p, |_, _| g.sample(unif) * scale);
        let mut g = stream(seed, rep, ROLE_Y);
        let noise = DMatrix::from_fn(n, p, |_, _| self.noise_sd * g.sample::<f64, _>(StandardNormal));
        let y = &x * &beta + &u * &eta + noise;
        let controls = first_nulls(&nonnull, self.n_controls)?;
        Ok(SimInstance {
            dataset: Dataset::new(x, y, controls, None)?,
            u,
            beta,
            eta,
            nonnull,
        })
    }
}

/// Declared control set after contamination or data-driven selection.
pub fn apply_misspecification(inst: &SimInstance, cfg: &SimConfig, rep: usize) -> Result<Dataset> {
    let ds = &inst.dataset;
    match cfg.control_selection {
        ControlSelection::LeastVariable => {
            let mut stats: Vec<(f64, usize)> = (0..ds.p())
                .map(|j| naive_wald(ds, j, cfg.link).map(|w| (w.abs(), j)))
                .collect::<Result<_>>()?;
            stats.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = stats.iter().take(cfg.n_controls).map(|&(_, j)| j).collect();
            chosen.sort_unstable();
            ds.with_controls(chosen)
        }
        ControlSelection::Oracle => {
            if cfg.contamination == 0.0 {
                return Ok(ds.clone());
            }
            let k = (cfg.contamination * cfg.n_controls as f64).ceil() as usize;
            let mut nonnull: Vec<usize> = (0..ds.p()).filter(|&j| inst.nonnull[j]).collect();
            if k > nonnull.len() {
                return Err(PiiError::Invalid(format!(
                    "contamination needs {k} non-null outcomes, only {} exist",
                    nonnull.len()
                )));
            }
            let mut g = stream(cfg.seed, rep, ROLE_CONTAM);
            let mut controls = ds.controls().to_vec();
            controls.shuffle(&mut g);
            nonnull.shuffle(&mut g);
            controls.truncate(controls.len() - k);
            controls.extend_from_slice(&nonnull[..k]);
            controls.sort_unstable();
            ds.with_controls(controls)
        }
    }
}

/// Wald statistic of X in a per-outcome regression on [1, X].
fn naive_wald(ds: &Dataset, j: usize, link: SimLink) -> Result<f64> {
    let design = linalg::prepend_ones(ds.x());
    let y = DVector::from_column_slice(ds.y().column(j).as_slice());
    let fit = match link {
        SimLink::Logit => glm::logistic_fit(&design, &y),
        SimLink::Identity => glm::ols_fit(&design, &y),
    };
    Ok(match fit {
        Ok(f) if f.wald(1).is_finite() => f.wald(1),
        // separated or constant outcomes carry no evidence of association
        _ => 0.0,
    })
}

/// Per-outcome parametric p-values for the first covariate; failed fits
/// yield p = 1 and are counted.
fn glm_pvalues(ds: &Dataset, extra: Option<&DMatrix<f64>>, link: SimLink) -> (Vec<f64>, usize) {
    let base = match extra {
        Some(u) => linalg::hcat(ds.x(), u),
        None => ds.x().clone(),
    };
    let design = linalg::prepend_ones(&base);
    let tested = ds.tested();
    let out: Vec<Option<f64>> = tested
        .par_iter()
        .map(|&j| {
            let y = DVector::from_column_slice(ds.y().column(j).as_slice());
            let fit = match link {
                SimLink::Logit => glm::logistic_fit(&design, &y),
                SimLink::Identity => glm::ols_fit(&design, &y),
            };
            fit.ok().map(|f| f.wald(1)).filter(|w| w.is_finite()).map(two_sided_p)
        })
        .collect();
    let failures = out.iter().filter(|v| v.is_none()).count();
    (out.into_iter().map(|v| v.unwrap_or(1.0)).collect(), failures)
}

/// Metrics of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub replication: usize,
    pub method: Method,
    pub error: Option<String>,
    pub power: Option<f64>,
    pub type1: Option<f64>,
    pub fdp: Option<f64>,
    pub n_rejected_bh: Option<usize>,
    /// Largest |mean φ̃| coordinate (doubly robust methods only).
    pub max_influence_mean: Option<f64>,
    /// Affine projection gap between estimated and true embedding (`pii_est_u`).
    pub proj_gap: Option<f64>,
    /// Outcomes whose parametric fit failed and were scored with p = 1.
    pub glm_failures: Option<usize>,
    /// Non-null outcomes inside the declared control set.
    pub nonnull_controls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            se,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub power: Option<Estimate>,
    pub type1: Option<Estimate>,
    pub fdp: Option<Estimate>,
    pub proj_gap: Option<Estimate>,
    pub max_influence_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
}

impl SimReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == m)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Tidy table: one row per method × replication × metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "replication", "metric", "value"])?;
        for r in &self.records {
            let metrics = [
                ("power", r.power),
                ("type1", r.type1),
                ("fdp", r.fdp),
                ("n_rejected_bh", r.n_rejected_bh.map(|v| v as f64)),
                ("max_influence_mean", r.max_influence_mean),
                ("proj_gap", r.proj_gap),
            ];
            for (name, v) in metrics {
                if let Some(v) = v {
                    w.write_record([r.method.name(), &r.replication.to_string(), name, &fmt_f64(v)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Run every configured method on one replication.
pub fn run_replication(cfg: &SimConfig, rep: usize) -> Vec<RepRecord> {
    let blank = |method: Method, error: Option<String>| RepRecord {
        replication: rep,
        method,
        error,
        power: None,
        type1: None,
        fdp: None,
        n_rejected_bh: None,
        max_influence_mean: None,
        proj_gap: None,
        glm_failures: None,
        nonnull_controls: 0,
    };
    let setup = gen_partial_linear(cfg, rep).and_then(|inst| {
        let ds = apply_misspecification(&inst, cfg, rep)?;
        Ok((inst, ds))
    });
    let (inst, ds) = match setup {
        Ok(v) => v,
        Err(e) => return cfg.methods.iter().map(|&m| blank(m, Some(e.to_string()))).collect(),
    };
    let nonnull_controls = ds.controls().iter().filter(|&&j| inst.nonnull[j]).count();
    let tested = ds.tested();
    cfg.methods
        .iter()
        .map(|&method| {
            let mut rec = blank(method, None);
            rec.nonnull_controls = nonnull_controls;
            let outcome = (|| -> Result<()> {
                let pvalues = match method {
                    Method::GlmNaive | Method::GlmOracle => {
                        let extra = (method == Method::GlmOracle).then_some(&inst.u);
                        let (pv, fails) = glm_pvalues(&ds, extra, cfg.link);
                        rec.glm_failures = Some(fails);
                        pv
                    }
                    Method::PiiTrueU | Method::PiiEstU => {
                        let emb = if method == Method::PiiTrueU {
                            EmbeddingResult::external(inst.u.clone())?
                        } else {
                            let e = embed_for(&ds, cfg)?;
                            let u_rows = match &e.rows {
                                Some(rows) => linalg::select_rows(&inst.u, rows),
                                None => inst.u.clone(),
                            };
                            rec.proj_gap = Some(affine_projection_gap(&u_rows, &e.u_hat)?);
                            e
                        };
                        let opts = cfg.dr_options(rep);
                        let fit = match cfg.link {
                            SimLink::Logit => fit_glink(&ds, &emb, &opts)?,
                            SimLink::Identity => fit_linear(&ds, &emb, &opts)?,
                        };
                        rec.max_influence_mean = Some(fit.max_influence_mean());
                        tested.iter().map(|&j| fit.result.pvalues[(0, j)]).collect()
                    }
                };
                let mut report = TestReport::from_pvalues(tested.clone(), pvalues, cfg.alpha, cfg.q_fdr)?;
                let m = report.score(&inst.nonnull)?;
                rec.power = m.power;
                rec.type1 = m.type1;
                rec.fdp = Some(m.fdp);
                rec.n_rejected_bh = Some(report.rejected_bh.iter().filter(|&&r| r).count());
                Ok(())
            })();
            if let Err(e) = outcome {
                rec.error = Some(e.to_string());
            }
            rec
        })
        .collect()
}

fn embed_for(ds: &Dataset, cfg: &SimConfig) -> Result<EmbeddingResult> {
    match cfg.embed_source {
        EmbedSource::Controls => embed(ds, &cfg.embed_config()),
        EmbedSource::AllOutcomes => {
            // a padding column keeps the tested set nonempty
            let p = ds.p();
            let y = ds.y().clone().insert_column(p, 0.0);
            let all = Dataset::new(ds.x().clone(), y, 0..p, None)?;
            embed(&all, &cfg.embed_config())
        }
    }
}

pub fn run_experiment(cfg: &SimConfig) -> Result<SimReport> {
    run_experiment_with_progress(cfg, |_| {})
}

/// As `run_experiment`, calling `progress` with each finished replication's records.
pub fn run_experiment_with_progress<F>(cfg: &SimConfig, progress: F) -> Result<SimReport>
where
    F: Fn(&[RepRecord]) + Sync,
{
    cfg.validate()?;
    let records: Vec<RepRecord> = (0..cfg.replications)
        .into_par_iter()
        .flat_map_iter(|rep| {
            let recs = run_replication(cfg, rep);
            progress(&recs);
            recs
        })
        .collect();
    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        let mine: Vec<&RepRecord> = records.iter().filter(|r| r.method == method).collect();
        let ok: Vec<&&RepRecord> = mine.iter().filter(|r| r.error.is_none()).collect();
        let n_failed = mine.len() - ok.len();
        if n_failed * 10 > mine.len() {
            let first = mine.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(PiiError::Numerical(format!(
                "{}: {n_failed} of {} replications failed (first: {first})",
                method.name(),
                mine.len()
            )));
        }
        let collect = |f: fn(&RepRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        summaries.push(MethodSummary {
            method,
            n_ok: ok.len(),
            n_failed,
            power: Estimate::of(&collect(|r| r.power)),
            type1: Estimate::of(&collect(|r| r.type1)),
            fdp: Estimate::of(&collect(|r| r.fdp)),
            proj_gap: Estimate::of(&collect(|r| r.proj_gap)),
            max_influence_mean: ok.iter().filter_map(|r| r.max_influence_mean).reduce(f64::max),
        });
    }
    Ok(SimReport {
        config: cfg.clone(),
        summaries,
        records,
    })
}
