//! Per-outcome decisions at level α, Benjamini–Hochberg control of the
//! false discovery rate, and scoring against known truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, FitResult};
use crate::error::{PiiError, Result};

/// Benjamini–Hochberg step-up rule. NaN entries are "not tested": they are
/// never rejected and do not count towards m.
pub fn bh_adjust(pvalues: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(PiiError::Config(format!("FDR level {q} outside (0, 1)")));
    }
    let mut order: Vec<usize> = Vec::with_capacity(pvalues.len());
    for (i, &p) in pvalues.iter().enumerate() {
        if p.is_nan() {
            continue;
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(PiiError::Invalid(format!("p-value {p} at {i} outside [0, 1]")));
        }
        order.push(i);
    }
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let m = order.len() as f64;
    let mut k_star = 0;
    for (k, &i) in order.iter().enumerate() {
        let thr = (k + 1) as f64 * q / m;
        // a few ulps of slack so values computed as k·q/m count as on the boundary
        if pvalues[i] <= thr * (1.0 + 4.0 * f64::EPSILON) {
            k_star = k + 1;
        }
    }
    let mut out = vec![false; pvalues.len()];
    for &i in &order[..k_star] {
        out[i] = true;
    }
    Ok(out)
}

/// Power, type-I error and false discovery proportion. `None` marks a
/// rate with an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub power: Option<f64>,
    pub type1: Option<f64>,
    pub fdp: f64,
}

/// All slices are aligned over the tested outcomes.
pub fn score_against_truth(rejected_raw: &[bool], rejected_bh: &[bool], true_nonnull: &[bool]) -> Result<Metrics> {
    if rejected_raw.len() != true_nonnull.len() || rejected_bh.len() != true_nonnull.len() {
        return Err(PiiError::Dimension("decisions and truth differ in length".into()));
    }
    let rate = |want_nonnull: bool| {
        let (mut hits, mut total) = (0usize, 0usize);
        for (&r, &t) in rejected_raw.iter().zip(true_nonnull) {
            if t == want_nonnull {
                total += 1;
                hits += r as usize;
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    };
    let n_bh = rejected_bh.iter().filter(|&&r| r).count();
    let false_bh = rejected_bh.iter().zip(true_nonnull).filter(|(&r, &t)| r && !t).count();
    Ok(Metrics {
        power: rate(true),
        type1: rate(false),
        fdp: if n_bh == 0 { 0.0 } else { false_bh as f64 / n_bh as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub alpha: f64,
    pub q_fdr: f64,
    /// Coordinate of the effect vector being tested.
    pub coordinate: usize,
    /// Outcome indices of the tested outcomes (controls excluded).
    pub outcomes: Vec<usize>,
    pub pvalues: Vec<f64>,
    pub rejected_raw: Vec<bool>,
    pub rejected_bh: Vec<bool>,
    pub metrics: Option<Metrics>,
}

impl TestReport {
    /// Decisions for one effect coordinate of a fit. `truth`, when given,
    /// is indexed by outcome (length p).
    pub fn from_fit(fit: &FitResult, coordinate: usize, alpha: f64, q_fdr: f64, truth: Option<&[bool]>) -> Result<Self> {
        if coordinate >= fit.d() {
            return Err(PiiError::Config(format!("coordinate {coordinate} but d={}", fit.d())));
        }
        let outcomes = fit.tested_indices();
        let pvalues: Vec<f64> = outcomes.iter().map(|&j| fit.pvalues[(coordinate, j)]).collect();
        let mut report = Self::from_pvalues(outcomes, pvalues, alpha, q_fdr)?;
        report.coordinate = coordinate;
        if let Some(t) = truth {
            if t.len() != fit.p() {
                return Err(PiiError::Dimension(format!("truth has {} entries, p={}", t.len(), fit.p())));
            }
            report.score(t)?;
        }
        Ok(report)
    }

    pub fn from_pvalues(outcomes: Vec<usize>, pvalues: Vec<f64>, alpha: f64, q_fdr: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PiiError::Config(format!("alpha {alpha} outside (0, 1)")));
        }
        if pvalues.iter().any(|p| p.is_nan()) {
            return Err(PiiError::Invalid("tested outcome without a p-value".into()));
        }
        let rejected_bh = bh_adjust(&pvalues, q_fdr)?;
        let rejected_raw = pvalues.iter().map(|&p| p < alpha).collect();
        Ok(Self {
            alpha,
            q_fdr,
            coordinate: 0,
            outcomes,
            pvalues,
            rejected_raw,
            rejected_bh,
            metrics: None,
        })
    }

    /// Attach metrics given truth indexed by outcome.
    pub fn score(&mut self, nonnull_by_outcome: &[bool]) -> Result<Metrics> {
        let truth: Vec<bool> = self
            .outcomes
            .iter()
            .map(|&j| {
                nonnull_by_outcome
                    .get(j)
                    .copied()
                    .ok_or_else(|| PiiError::Dimension(format!("no truth for outcome {j}")))
            })
            .collect::<Result<_>>()?;
        let m = score_against_truth(&self.rejected_raw, &self.rejected_bh, &truth)?;
        self.metrics = Some(m);
        Ok(m)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// One row per tested outcome.
    pub fn write_csv(&self, path: &Path, names: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outcome", "name", "pvalue", "rejected_raw", "rejected_bh"])?;
        for (k, &j) in self.outcomes.iter().enumerate() {
            let name = names.and_then(|n| n.get(j)).cloned().unwrap_or_default();
            w.write_record([
                j.to_string(),
                name,
                fmt_f64(self.pvalues[k]),
                self.rejected_raw[k].to_string(),
                self.rejected_bh[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
