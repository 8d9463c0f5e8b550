//! Finite-support identification of treatment and outcome mechanisms, and
//! of counterfactual outcome distributions, from observed probability
//! tables plus an admissible joint table of controls and confounder.
//!
//! Index conventions for the flat arrays:
//! `f_obs[(a * n_yr + b) * n_x + c]` for (y_C = a, y_R = b, x = c) and
//! `f_tilde_ycu[a * n_u + k]` for (y_C = a, u = k).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PiiError, Result};
use crate::linalg;

const SUM_TOL: f64 = 1e-12;
const MARGINAL_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-6;
const STRICT_NEG_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmfTables {
    pub supp_x: Vec<Value>,
    pub supp_u: Vec<Value>,
    pub supp_yc: Vec<Value>,
    pub supp_yr: Vec<Value>,
    pub f_obs: Vec<f64>,
    pub f_tilde_ycu: Vec<f64>,
}

impl PmfTables {
    pub fn n_x(&self) -> usize {
        self.supp_x.len()
    }
    pub fn n_u(&self) -> usize {
        self.supp_u.len()
    }
    pub fn n_yc(&self) -> usize {
        self.supp_yc.len()
    }
    pub fn n_yr(&self) -> usize {
        self.supp_yr.len()
    }

    pub fn obs(&self, a: usize, b: usize, c: usize) -> f64 {
        self.f_obs[(a * self.n_yr() + b) * self.n_x() + c]
    }

    pub fn tilde(&self, a: usize, k: usize) -> f64 {
        self.f_tilde_ycu[a * self.n_u() + k]
    }

    /// f(x) for every treatment level.
    pub fn f_x(&self) -> Vec<f64> {
        (0..self.n_x())
            .map(|c| {
                (0..self.n_yc())
                    .flat_map(|a| (0..self.n_yr()).map(move |b| (a, b)))
                    .map(|(a, b)| self.obs(a, b, c))
                    .sum()
            })
            .collect()
    }

    /// The |y_C| × |u| matrix f̃(y_C, u).
    pub fn tilde_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_yc(), self.n_u(), |a, k| self.tilde(a, k))
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, nyc, nyr) = (self.n_x(), self.n_u(), self.n_yc(), self.n_yr());
        if nx == 0 || nu == 0 || nyc == 0 || nyr == 0 {
            return Err(PiiError::Invalid("every support must be nonempty".into()));
        }
        if self.f_obs.len() != nyc * nyr * nx {
            return Err(PiiError::Dimension(format!(
                "f_obs has {} entries, expected {}",
                self.f_obs.len(),
                nyc * nyr * nx
            )));
        }
        if self.f_tilde_ycu.len() != nyc * nu {
            return Err(PiiError::Dimension(format!(
                "f_tilde_ycu has {} entries, expected {}",
                self.f_tilde_ycu.len(),
                nyc * nu
            )));
        }
        for (name, t) in [("f_obs", &self.f_obs), ("f_tilde_ycu", &self.f_tilde_ycu)] {
            if let Some(i) = t.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(PiiError::Invalid(format!("{name}[{i}] = {} is not a probability", t[i])));
            }
            let s: f64 = t.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(PiiError::Invalid(format!("{name} sums to {s}")));
            }
        }
        for a in 0..nyc {
            let obs: f64 = (0..nyr).flat_map(|b| (0..nx).map(move |c| (b, c))).map(|(b, c)| self.obs(a, b, c)).sum();
            let tilde: f64 = (0..nu).map(|k| self.tilde(a, k)).sum();
            if (obs - tilde).abs() > MARGINAL_TOL {
                return Err(PiiError::Invalid(format!(
                    "admissible factor disagrees with observed control margin at y_C index {a}: {tilde} vs {obs}"
                )));
            }
        }
        for k in 0..nu {
            let fu: f64 = (0..nyc).map(|a| self.tilde(a, k)).sum();
            if fu <= 0.0 {
                return Err(PiiError::Invalid(format!("confounder level {k} has zero mass")));
            }
        }
        Ok(())
    }
}

/// A solved conditional table plus diagnostics of the linear solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solved {
    /// Shape of `table` (row-major over the listed axes).
    pub dims: Vec<usize>,
    pub table: Vec<f64>,
    /// Largest residual norm over the individual solves.
    pub max_residual: f64,
    /// Most negative entry before clipping (0 when none).
    pub min_raw_entry: f64,
}

fn require_full_column_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let s = linalg::singular_values_desc(m);
    let tol = linalg::RANK_TOL * s.first().copied().unwrap_or(0.0) * (m.nrows().max(m.ncols()) as f64);
    let rank = s.iter().filter(|&&v| v > tol).count();
    if rank < m.ncols() {
        return Err(PiiError::RankDeficient(format!(
            "{what} has rank {rank} < {} (completeness fails)",
            m.ncols()
        )));
    }
    Ok(())
}

fn solve_column(m: &DMatrix<f64>, rhs: DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let rhs = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let sol = linalg::lstsq(m, &rhs)?;
    let res = (m * &sol - &rhs).norm();
    Ok((sol.column(0).into_owned(), res))
}

fn check_residual(res: f64) -> Result<()> {
    if res > RESIDUAL_TOL {
        return Err(PiiError::Inconsistent(res));
    }
    Ok(())
}

fn check_strict(min_raw: f64, strict: bool) -> Result<()> {
    if strict && min_raw < STRICT_NEG_TOL {
        return Err(PiiError::Numerical(format!("negative probability {min_raw:e} in strict mode")));
    }
    Ok(())
}

/// Recover f̃(x|u) from Σ_u f̃(y_C,u) f̃(x|u) = f(y_C,x). Output dims
/// `[n_x, n_u]`.
pub fn solve_treatment(t: &PmfTables, strict: bool) -> Result<Solved> {
    t.validate()?;
    let (nx, nu, nyc, nyr) = (t.n_x(), t.n_u(), t.n_yc(), t.n_yr());
    let m = t.tilde_matrix();
    require_full_column_rank(&m, "f̃(y_C, u)")?;
    let mut raw = DMatrix::zeros(nx, nu);
    let mut max_residual: f64 = 0.0;
    for c in 0..nx {
        let rhs = DVector::from_fn(nyc, |a, _| (0..nyr).map(|b| t.obs(a, b, c)).sum());
        let (sol, res) = solve_column(&m, rhs)?;
        max_residual = max_residual.max(res);
        raw.set_row(c, &sol.transpose());
    }
    check_residual(max_residual)?;
    let min_raw_entry = raw.min().min(0.0);
    check_strict(min_raw_entry, strict)?;
    let mut table = raw.map(|v| v.max(0.0));
    for k in 0..nu {
        let s = table.column(k).sum();
        if s <= 0.0 {
            return Err(PiiError::Numerical(format!("treatment column {k} vanished after clipping")));
        }
        table.column_mut(k).unscale_mut(s);
    }
    Ok(Solved {
        dims: vec![nx, nu],
        table: (0..nx).flat_map(|c| (0..nu).map(move |k| (c, k))).map(|(c, k)| table[(c, k)]).collect(),
        max_residual,
        min_raw_entry,
    })
}

/// Recover f̃(y_R|x,u) given f̃(x|u) (dims `[n_x, n_u]`). Output dims
/// `[n_yr, n_x, n_u]`.
pub fn solve_outcome(t: &PmfTables, x_given_u: &Solved, strict: bool) -> Result<Solved> {
    t.validate()?;
    let (nx, nu, nyc, nyr) = (t.n_x(), t.n_u(), t.n_yc(), t.n_yr());
    if x_given_u.dims != [nx, nu] {
        return Err(PiiError::Dimension(format!("treatment table dims {:?}", x_given_u.dims)));
    }
    let fx = t.f_x();
    if let Some(c) = fx.iter().position(|&v| v <= 0.0) {
        return Err(PiiError::Invalid(format!("treatment level {c} has zero probability")));
    }
    let mut raw = vec![0.0; nyr * nx * nu];
    let idx = |b: usize, c: usize, k: usize| (b * nx + c) * nu + k;
    let mut max_residual: f64 = 0.0;
    for c in 0..nx {
        let m = DMatrix::from_fn(nyc, nu, |a, k| t.tilde(a, k) * x_given_u.table[c * nu + k] / fx[c]);
        require_full_column_rank(&m, &format!("f̃(y_C, u | x) at x index {c}"))?;
        for b in 0..nyr {
            let rhs = DVector::from_fn(nyc, |a, _| t.obs(a, b, c) / fx[c]);
            let (sol, res) = solve_column(&m, rhs)?;
            max_residual = max_residual.max(res);
            for k in 0..nu {
                raw[idx(b, c, k)] = sol[k];
            }
        }
    }
    check_residual(max_residual)?;
    let min_raw_entry = raw.iter().copied().fold(0.0, f64::min);
    check_strict(min_raw_entry, strict)?;
    let mut table: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    for c in 0..nx {
        for k in 0..nu {
            let s: f64 = (0..nyr).map(|b| table[idx(b, c, k)]).sum();
            if s <= 0.0 {
                return Err(PiiError::Numerical(format!("outcome table at (x {c}, u {k}) vanished after clipping")));
            }
            for b in 0..nyr {
                table[idx(b, c, k)] /= s;
            }
        }
    }
    Ok(Solved {
        dims: vec![nyr, nx, nu],
        table,
        max_residual,
        min_raw_entry,
    })
}

/// f_{Y(x)}(y_C, y_R) = Σ_u f̃(y_R|x,u) f̃(y_C,u). Output flat over
/// `[n_yc, n_yr, n_x]`, the same layout as `f_obs`.
pub fn counterfactual(t: &PmfTables, yr_given_xu: &Solved) -> Result<Vec<f64>> {
    let (nx, nu, nyc, nyr) = (t.n_x(), t.n_u(), t.n_yc(), t.n_yr());
    if yr_given_xu.dims != [nyr, nx, nu] {
        return Err(PiiError::Dimension(format!("outcome table dims {:?}", yr_given_xu.dims)));
    }
    let mut out = vec![0.0; nyc * nyr * nx];
    for a in 0..nyc {
        for b in 0..nyr {
            for c in 0..nx {
                out[(a * nyr + b) * nx + c] = (0..nu)
                    .map(|k| yr_given_xu.table[(b * nx + c) * nu + k] * t.tilde(a, k))
                    .sum();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identified {
    pub x_given_u: Solved,
    pub yr_given_xu: Solved,
    /// Flat over `[n_yc, n_yr, n_x]`.
    pub counterfactual: Vec<f64>,
}

pub fn identify(t: &PmfTables, strict: bool) -> Result<Identified> {
    let x_given_u = solve_treatment(t, strict)?;
    let yr_given_xu = solve_outcome(t, &x_given_u, strict)?;
    let counterfactual = counterfactual(t, &yr_given_xu)?;
    Ok(Identified {
        x_given_u,
        yr_given_xu,
        counterfactual,
    })
}

/// A fully specified finite model in which the controls are independent of
/// (X, Y_R) given U. Used to build exact observed tables by enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteModel {
    pub f_u: Vec<f64>,
    /// `[n_x][n_u]`
    pub x_given_u: Vec<Vec<f64>>,
    /// `[n_yc][n_u]`
    pub yc_given_u: Vec<Vec<f64>>,
    /// `[n_yr][n_x][n_u]`
    pub yr_given_xu: Vec<Vec<Vec<f64>>>,
}

impl FiniteModel {
    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.x_given_u.len(), self.f_u.len(), self.yc_given_u.len(), self.yr_given_xu.len())
    }

    /// Observed tables and the true admissible factor f(y_C,u) = f(y_C|u)f(u).
    pub fn tables(&self) -> PmfTables {
        let (nx, nu, nyc, nyr) = self.dims();
        let labels = |n: usize| (0..n).map(Value::from).collect::<Vec<_>>();
        let mut f_obs = vec![0.0; nyc * nyr * nx];
        for a in 0..nyc {
            for b in 0..nyr {
                for c in 0..nx {
                    f_obs[(a * nyr + b) * nx + c] = (0..nu)
                        .map(|k| self.f_u[k] * self.x_given_u[c][k] * self.yc_given_u[a][k] * self.yr_given_xu[b][c][k])
                        .sum();
                }
            }
        }
        let f_tilde_ycu = (0..nyc)
            .flat_map(|a| (0..nu).map(move |k| (a, k)))
            .map(|(a, k)| self.yc_given_u[a][k] * self.f_u[k])
            .collect();
        PmfTables {
            supp_x: labels(nx),
            supp_u: labels(nu),
            supp_yc: labels(nyc),
            supp_yr: labels(nyr),
            f_obs,
            f_tilde_ycu,
        }
    }

    /// True f_{Y(x)}(y_C, y_R) = Σ_u f(y_R|u,x) f(y_C|u) f(u), flat over
    /// `[n_yc, n_yr, n_x]`.
    pub fn counterfactual(&self) -> Vec<f64> {
        let (nx, nu, nyc, nyr) = self.dims();
        let mut out = vec![0.0; nyc * nyr * nx];
        for a in 0..nyc {
            for b in 0..nyr {
                for c in 0..nx {
                    out[(a * nyr + b) * nx + c] = (0..nu)
                        .map(|k| self.yr_given_xu[b][c][k] * self.yc_given_u[a][k] * self.f_u[k])
                        .sum();
                }
            }
        }
        out
    }

    /// Two-level confounder, binary treatment, two binary controls and a
    /// binary remaining outcome.
    pub fn binary_example() -> Self {
        let f_u = vec![0.4, 0.6];
        let x_given_u = vec![vec![0.7, 0.2], vec![0.3, 0.8]];
        let p1 = [0.2, 0.9];
        let p2 = [0.6, 0.3];
        let mut yc_given_u = vec![vec![0.0; 2]; 4];
        for (a, row) in yc_given_u.iter_mut().enumerate() {
            let (c1, c2) = (a >> 1, a & 1);
            for k in 0..2 {
                let f1 = if c1 == 1 { p1[k] } else { 1.0 - p1[k] };
                let f2 = if c2 == 1 { p2[k] } else { 1.0 - p2[k] };
                row[k] = f1 * f2;
            }
        }
        // P(Y_R = 1 | x, u)
        let q = [[0.1, 0.5], [0.35, 0.85]];
        let yr_given_xu = vec![
            (0..2).map(|c| (0..2).map(|k| 1.0 - q[c][k]).collect()).collect(),
            (0..2).map(|c| (0..2).map(|k| q[c][k]).collect()).collect(),
        ];
        Self {
            f_u,
            x_given_u,
            yc_given_u,
            yr_given_xu,
        }
    }
}

/// Relabel the confounder levels of an admissible factor.
pub fn permute_u(t: &PmfTables, perm: &[usize]) -> PmfTables {
    let nu = t.n_u();
    let mut out = t.clone();
    for a in 0..t.n_yc() {
        for k in 0..nu {
            out.f_tilde_ycu[a * nu + perm[k]] = t.tilde(a, k);
        }
    }
    for k in 0..nu {
        out.supp_u[perm[k]] = t.supp_u[k].clone();
    }
    out
}
