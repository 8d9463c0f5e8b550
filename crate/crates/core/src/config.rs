//! Run configuration read from a TOML file. Unknown keys are rejected at
//! every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{BackwardErrorReport, BiasBoundReport, FwlReport, TrendReport};
use crate::dr::DrOptions;
use crate::embedding::{EmbedConfig, EmbedKind, PreprocessStep};
use crate::error::{PiiError, Result};
use crate::simulation::rate::RateConfig;
use crate::simulation::{LinearGaussian, SimConfig};

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to every seeded section that does not set its own seed.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub simulate: Option<SimConfig>,
    pub rate: Option<RateConfig>,
    pub embed: Option<EmbedSection>,
    pub fit: Option<FitSection>,
    pub test: Option<TestSection>,
    pub identify: Option<IdentifySection>,
    pub diagnose: Option<DiagnoseSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub x: PathBuf,
    pub y: PathBuf,
    pub controls: PathBuf,
    pub method: EmbedKind,
    pub rank: usize,
    #[serde(default)]
    pub preprocessing: Vec<PreprocessStep>,
    #[serde(default)]
    pub split_fraction: f64,
}

impl EmbedSection {
    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            method: self.method,
            rank: self.rank,
            preprocessing: self.preprocessing.clone(),
            split_fraction: self.split_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub x: PathBuf,
    pub y: PathBuf,
    pub controls: PathBuf,
    /// Score CSV of a precomputed embedding, one row per observation.
    pub embedding: Option<PathBuf>,
    /// Recipe used when no embedding file is given.
    pub embed: Option<EmbedConfig>,
    pub options: DrOptions,
}

fn d_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    /// Fit JSON written by the `fit` subcommand.
    pub fit: PathBuf,
    #[serde(default = "d_level")]
    pub alpha: f64,
    #[serde(default = "d_level")]
    pub q_fdr: f64,
    #[serde(default)]
    pub coordinate: usize,
    /// Indices of outcomes known to be non-null, for scoring.
    pub nonnull: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySection {
    /// Observed and control-confounder tables (JSON).
    pub tables: Option<PathBuf>,
    /// A full finite model (JSON); its tables are derived and the recovered
    /// quantities are compared with the model's own.
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFiles {
    pub x: PathBuf,
    pub y: PathBuf,
    pub controls: PathBuf,
    /// True (or reference) embedding scores.
    pub u: PathBuf,
    /// Estimated embedding scores (bias bound only).
    pub u_est: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generated {
    pub dgp: LinearGaussian,
    pub instances: usize,
}

fn d_noise() -> f64 {
    0.02
}
fn d_true() -> bool {
    true
}
fn d_instances() -> usize {
    100
}
fn d_dim() -> usize {
    4
}
fn d_perturbation() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSystem {
    /// Row-major square matrix.
    pub a: Vec<Vec<f64>>,
    pub delta_a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub delta_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnoseSection {
    Fwl {
        files: Option<EmbeddingFiles>,
        generate: Option<Generated>,
    },
    BiasBound {
        files: Option<EmbeddingFiles>,
        generate: Option<Generated>,
        /// Û = U + noise·N(0, 1) for generated instances.
        #[serde(default = "d_noise")]
        noise: f64,
        /// Project X off [1, U] for generated instances.
        #[serde(default = "d_true")]
        orthogonalize_x: bool,
    },
    BackwardError {
        system: Option<ExplicitSystem>,
        #[serde(default = "d_instances")]
        instances: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_perturbation")]
        perturbation: f64,
    },
    BiasTrend {
        dgp: LinearGaussian,
        noise_levels: Vec<f64>,
        replications: usize,
    },
}

/// Output of the `diagnose` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum DiagnoseReport {
    Fwl {
        max_coef_gap: f64,
        max_hc0_gap: f64,
        max_homoskedastic_rel_gap: f64,
        instances: Vec<FwlReport>,
    },
    BiasBound {
        applicable: usize,
        violations: usize,
        instances: Vec<BiasBoundReport>,
    },
    BackwardError {
        applicable: usize,
        violations: usize,
        instances: Vec<BackwardErrorReport>,
    },
    BiasTrend(TrendReport),
}

/// Sections whose own `seed` falls back to the global one.
const SEEDED_SECTIONS: [&str; 2] = ["simulate", "rate"];

impl RunConfig {
    /// Parse TOML text, propagate the global seed, and optionally override
    /// every section seed.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PiiError::Config(e.to_string()))?;
        if let Some(s) = seed_override {
            table.insert("seed".into(), seed_value(s)?);
        }
        let global = match table.get("seed") {
            Some(v) => v.clone(),
            None => toml::Value::Integer(0),
        };
        for name in SEEDED_SECTIONS {
            if let Some(toml::Value::Table(section)) = table.get_mut(name) {
                if seed_override.is_some() || !section.contains_key("seed") {
                    section.insert("seed".into(), global.clone());
                }
            }
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PiiError::Config(e.to_string()))
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, seed_override)
    }

    /// The configuration with every default filled in.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PiiError::Config(format!("cannot serialize configuration: {e}")))
    }
}

fn seed_value(s: u64) -> Result<toml::Value> {
    i64::try_from(s)
        .map(toml::Value::Integer)
        .map_err(|_| PiiError::Config(format!("seed {s} exceeds the TOML integer range")))
}
