//! Subcommand drivers shared by the binary and its tests.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{DiagnoseReport, DiagnoseSection, EmbeddingFiles, RunConfig};
use crate::data::{load_dataset, read_matrix_csv, Dataset, EmbeddingResult, FitResult};
use crate::diagnostics;
use crate::dr::{fit_glink, fit_linear, LinkFunction};
use crate::embedding::embed;
use crate::error::{PiiError, Result};
use crate::identification::{identify, FiniteModel, PmfTables};
use crate::simulation::rate::nuisance_rate_study;
use crate::simulation::run_experiment_with_progress;
use crate::testing::TestReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Embed,
    Fit,
    Test,
    Identify,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Embed => "embed",
            Command::Fit => "fit",
            Command::Test => "test",
            Command::Identify => "identify",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(err: &PiiError) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Load the configuration, run `cmd`, and return the files written.
pub fn run(cmd: Command, config_path: &Path, ov: &Overrides) -> Result<Vec<PathBuf>> {
    let mut cfg = RunConfig::load(config_path, ov.seed)?;
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    if let Some(t) = ov.threads {
        cfg.threads = t;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PiiError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cmd, &cfg))
}

fn missing(cmd: Command) -> PiiError {
    PiiError::Config(format!("configuration has no [{}] section", cmd.name()))
}

struct Out {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Out {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        let mut out = Self {
            dir: cfg.out_dir.clone(),
            written: Vec::new(),
        };
        let snapshot = cfg.resolved_toml()?;
        out.text("resolved_config.toml", &snapshot)?;
        Ok(out)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(p, body)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    // validate the section before creating any output
    let has_section = match cmd {
        Command::Simulate => cfg.simulate.is_some() || cfg.rate.is_some(),
        Command::Embed => cfg.embed.is_some(),
        Command::Fit => cfg.fit.is_some(),
        Command::Test => cfg.test.is_some(),
        Command::Identify => cfg.identify.is_some(),
        Command::Diagnose => cfg.diagnose.is_some(),
    };
    if !has_section {
        return Err(missing(cmd));
    }
    if let Some(sim) = &cfg.simulate {
        if cmd == Command::Simulate {
            sim.validate()?;
        }
    }
    let mut out = Out::new(cfg)?;
    match cmd {
        Command::Simulate => simulate(cfg, &mut out)?,
        Command::Embed => embed_cmd(cfg, &mut out)?,
        Command::Fit => fit_cmd(cfg, &mut out)?,
        Command::Test => test_cmd(cfg, &mut out)?,
        Command::Identify => identify_cmd(cfg, &mut out)?,
        Command::Diagnose => diagnose_cmd(cfg, &mut out)?,
    }
    Ok(out.written)
}

fn simulate(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    if let Some(sim) = &cfg.simulate {
        let report = run_experiment_with_progress(sim, |recs| {
            for r in recs {
                let status = match &r.error {
                    Some(e) => format!("failed: {e}"),
                    None => format!(
                        "type1={} power={} fdp={}",
                        fmt_opt(r.type1),
                        fmt_opt(r.power),
                        fmt_opt(r.fdp)
                    ),
                };
                eprintln!("replication {} {}: {status}", r.replication, r.method.name());
            }
        })?;
        out.json("sim_report.json", &report)?;
        let csv = out.path("sim_report.csv");
        report.write_csv(&csv)?;
    }
    if let Some(rate) = &cfg.rate {
        let report = nuisance_rate_study(rate)?;
        out.json("rate_report.json", &report)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn load_with_controls(x: &Path, y: &Path, controls: &Path) -> Result<Dataset> {
    load_dataset(x, y, Some(controls))
}

fn embed_cmd(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let sec = cfg.embed.as_ref().ok_or_else(|| missing(Command::Embed))?;
    let ds = load_with_controls(&sec.x, &sec.y, &sec.controls)?;
    let emb = embed(&ds, &sec.embed_config())?;
    let scores = out.path("embedding.csv");
    let sidecar = out.path("embedding.json");
    emb.write(&scores, &sidecar)
}

fn fit_cmd(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let sec = cfg.fit.as_ref().ok_or_else(|| missing(Command::Fit))?;
    let ds = load_with_controls(&sec.x, &sec.y, &sec.controls)?;
    let emb = match (&sec.embedding, &sec.embed) {
        (Some(path), None) => EmbeddingResult::external(read_matrix_csv(path)?.data)?,
        (None, Some(recipe)) => embed(&ds, recipe)?,
        _ => {
            return Err(PiiError::Config(
                "[fit] needs exactly one of `embedding` (file) or `embed` (recipe)".into(),
            ))
        }
    };
    let fit = if sec.options.link == LinkFunction::Identity {
        fit_linear(&ds, &emb, &sec.options)?
    } else {
        fit_glink(&ds, &emb, &sec.options)?
    };
    fit.result.write_json(&out.path("fit.json"))?;
    out.json(
        "fit_diagnostics.json",
        &serde_json::json!({
            "max_influence_mean": fit.max_influence_mean(),
            "n_clipped": fit.n_clipped,
            "n_used": fit.result.n_used,
        }),
    )
}

fn test_cmd(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let sec = cfg.test.as_ref().ok_or_else(|| missing(Command::Test))?;
    let fit = FitResult::read_json(&sec.fit)?;
    let truth = match &sec.nonnull {
        Some(idx) => {
            let mut t = vec![false; fit.p()];
            for &j in idx {
                *t.get_mut(j)
                    .ok_or_else(|| PiiError::Config(format!("non-null index {j} out of range")))? = true;
            }
            Some(t)
        }
        None => None,
    };
    let report = TestReport::from_fit(&fit, sec.coordinate, sec.alpha, sec.q_fdr, truth.as_deref())?;
    report.write_json(&out.path("test_report.json"))?;
    report.write_csv(&out.path("test_report.csv"), None)
}

fn identify_cmd(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let sec = cfg.identify.as_ref().ok_or_else(|| missing(Command::Identify))?;
    match (&sec.tables, &sec.model) {
        (Some(path), None) => {
            let tables: PmfTables = serde_json::from_str(&fs::read_to_string(path)?)?;
            let result = identify(&tables, sec.strict)?;
            out.json("identification.json", &result)
        }
        (None, Some(path)) => {
            let model: FiniteModel = serde_json::from_str(&fs::read_to_string(path)?)?;
            let result = identify(&model.tables(), sec.strict)?;
            let truth = model.counterfactual();
            let max_err = result
                .counterfactual
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            out.json(
                "identification.json",
                &serde_json::json!({
                    "result": result,
                    "model_counterfactual": truth,
                    "max_counterfactual_error": max_err,
                }),
            )
        }
        _ => Err(PiiError::Config("[identify] needs exactly one of `tables` or `model`".into())),
    }
}

struct Loaded {
    ds: Dataset,
    u: DMatrix<f64>,
    u_est: Option<DMatrix<f64>>,
}

fn load_files(f: &EmbeddingFiles) -> Result<Loaded> {
    Ok(Loaded {
        ds: load_with_controls(&f.x, &f.y, &f.controls)?,
        u: read_matrix_csv(&f.u)?.data,
        u_est: f.u_est.as_ref().map(|p| read_matrix_csv(p).map(|m| m.data)).transpose()?,
    })
}

fn one_source<'a, A, B>(files: &'a Option<A>, generate: &'a Option<B>) -> Result<(Option<&'a A>, Option<&'a B>)> {
    match (files, generate) {
        (Some(f), None) => Ok((Some(f), None)),
        (None, Some(g)) => Ok((None, Some(g))),
        _ => Err(PiiError::Config("[diagnose] needs exactly one of `files` or `generate`".into())),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PiiError::Dimension(format!("{what} is not a rectangular matrix")));
    }
    Ok(DMatrix::from_fn(k, rows[0].len(), |i, j| rows[i][j]))
}

fn diagnose_cmd(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let sec = cfg.diagnose.as_ref().ok_or_else(|| missing(Command::Diagnose))?;
    let seed = cfg.seed;
    let report = match sec {
        DiagnoseSection::Fwl { files, generate } => {
            let instances = match one_source(files, generate)? {
                (Some(f), _) => {
                    let l = load_files(f)?;
                    vec![diagnostics::fwl_check(&l.ds, &l.u)?]
                }
                (_, Some(g)) => diagnostics::fwl_instances(&g.dgp, g.instances, seed)?,
                _ => unreachable!(),
            };
            let max = |f: fn(&diagnostics::FwlReport) -> f64| instances.iter().map(f).fold(0.0, f64::max);
            DiagnoseReport::Fwl {
                max_coef_gap: max(|r| r.coef_gap),
                max_hc0_gap: max(|r| r.hc0_gap),
                max_homoskedastic_rel_gap: max(|r| r.homoskedastic_rel_gap),
                instances,
            }
        }
        DiagnoseSection::BiasBound {
            files,
            generate,
            noise,
            orthogonalize_x,
        } => {
            let instances = match one_source(files, generate)? {
                (Some(f), _) => {
                    let l = load_files(f)?;
                    let u_est = l
                        .u_est
                        .ok_or_else(|| PiiError::Config("bias_bound with files needs `u_est`".into()))?;
                    vec![diagnostics::bias_bound_linear(&l.ds, &l.u, &u_est)?]
                }
                (_, Some(g)) => diagnostics::bias_bound_instances(&g.dgp, g.instances, *noise, *orthogonalize_x, seed)?,
                _ => unreachable!(),
            };
            DiagnoseReport::BiasBound {
                applicable: instances.iter().filter(|r| r.applicable).count(),
                violations: instances.iter().filter(|r| !r.holds()).count(),
                instances,
            }
        }
        DiagnoseSection::BackwardError {
            system,
            instances,
            dim,
            perturbation,
        } => {
            let reports = match system {
                Some(s) => {
                    let a = matrix_from_rows(&s.a, "a")?;
                    let da = matrix_from_rows(&s.delta_a, "delta_a")?;
                    vec![diagnostics::backward_error_bound(
                        &a,
                        &da,
                        &DVector::from_column_slice(&s.b),
                        &DVector::from_column_slice(&s.delta_b),
                    )?]
                }
                None => diagnostics::backward_error_instances(*instances, *dim, *perturbation, seed)?,
            };
            DiagnoseReport::BackwardError {
                applicable: reports.iter().filter(|r| r.applicable).count(),
                violations: reports.iter().filter(|r| !r.holds()).count(),
                instances: reports,
            }
        }
        DiagnoseSection::BiasTrend {
            dgp,
            noise_levels,
            replications,
        } => {
            let trend = diagnostics::bias_trend(dgp, noise_levels, *replications, seed)?;
            let mut w = csv::Writer::from_path(out.path("bias_trend.csv"))?;
            w.write_record(["noise", "proj_gap", "bias", "median_outcome_bias", "error_vs_truth"])?;
            for r in &trend.rows {
                w.write_record(
                    [r.noise, r.proj_gap, r.bias, r.median_outcome_bias, r.error_vs_truth].map(crate::data::fmt_f64),
                )?;
            }
            w.flush()?;
            DiagnoseReport::BiasTrend(trend)
        }
    };
    out.json("diagnose.json", &report)
}
