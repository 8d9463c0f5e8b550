//! CART regression forests.
//!
//! Trees use axis-aligned splits that minimize the within-node sum of
//! squares. Each tree sees ⌈max_samples·n⌉ rows (drawn with replacement
//! when bootstrapping) and searches `m_try` uniformly sampled features per
//! node. Split search runs on per-feature presorted row lists that are
//! stably partitioned as the tree grows, so a level costs O(rows × features).

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiiError, Result};
use crate::rng;

/// Number of candidate features searched per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MTry {
    Count(usize),
    Keyword(MTryKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MTryKeyword {
    /// Every feature.
    All,
    /// ⌈q/3⌉.
    Third,
}

impl Default for MTry {
    fn default() -> Self {
        MTry::Keyword(MTryKeyword::Third)
    }
}

impl MTry {
    pub fn resolve(self, q: usize) -> usize {
        match self {
            MTry::Count(k) => k.clamp(1, q.max(1)),
            MTry::Keyword(MTryKeyword::All) => q.max(1),
            MTry::Keyword(MTryKeyword::Third) => q.div_ceil(3).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    /// `None` grows until leaves hit `min_leaf`.
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default = "default_max_samples")]
    pub max_samples: f64,
    #[serde(default)]
    pub m_try: MTry,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
}

fn default_trees() -> usize {
    50
}
fn default_max_samples() -> f64 {
    1.0
}
fn default_bootstrap() -> bool {
    true
}
fn default_min_leaf() -> usize {
    5
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: default_trees(),
            max_depth: None,
            max_samples: default_max_samples(),
            m_try: MTry::default(),
            bootstrap: default_bootstrap(),
            min_leaf: default_min_leaf(),
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(PiiError::Config("n_trees must be positive".into()));
        }
        if self.max_depth == Some(0) {
            return Err(PiiError::Config("max_depth must be positive or unlimited".into()));
        }
        if !(self.max_samples > 0.0 && self.max_samples <= 1.0) {
            return Err(PiiError::Config(format!("max_samples {} outside (0,1]", self.max_samples)));
        }
        if self.min_leaf == 0 {
            return Err(PiiError::Config("min_leaf must be positive".into()));
        }
        if self.m_try == MTry::Count(0) {
            return Err(PiiError::Config("m_try must be positive".into()));
        }
        Ok(())
    }
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut k = 0usize;
        loop {
            let node = &self.nodes[k];
            if node.feature == LEAF {
                return node.value;
            }
            k = if row(node.feature as usize) <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            let n = &nodes[k];
            if n.feature == LEAF {
                0
            } else {
                1 + walk(nodes, n.left as usize).max(walk(nodes, n.right as usize))
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }
}

/// A fitted forest; prediction is the mean of the tree predictions.
#[derive(Debug, Clone)]
pub struct ForestModel {
    trees: Vec<Tree>,
    n_features: usize,
}

impl ForestModel {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Vec<f64> {
        assert_eq!(features.ncols(), self.n_features, "feature count mismatch");
        (0..features.nrows())
            .map(|i| {
                // running mean keeps a constant ensemble exactly constant
                let mut mean = 0.0;
                for (t, tree) in self.trees.iter().enumerate() {
                    let v = tree.predict_row(|f| features[(i, f)]);
                    mean += (v - mean) / (t + 1) as f64;
                }
                mean
            })
            .collect()
    }

    /// Prediction of every individual tree for one row.
    pub fn tree_predictions(&self, row: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict_row(|f| row[f])).collect()
    }
}

/// Per-feature ascending row order, computed once and shared across trees
/// and target columns.
pub struct Presorted<'a> {
    cols: &'a [f64],
    n: usize,
    q: usize,
    order: Vec<Vec<u32>>,
}

impl<'a> Presorted<'a> {
    pub fn new(features: &'a DMatrix<f64>) -> Self {
        let (n, q) = features.shape();
        let cols = features.as_slice();
        let order = (0..q)
            .map(|f| {
                let col = &cols[f * n..(f + 1) * n];
                let mut o: Vec<u32> = (0..n as u32).collect();
                o.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                o
            })
            .collect();
        Self { cols, n, q, order }
    }

    fn value(&self, f: usize, row: u32) -> f64 {
        self.cols[f * self.n + row as usize]
    }
}

/// Fit one forest per target column, sharing the presort.
pub fn rf_fit_many(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    params: &ForestParams,
    seeds: &[u64],
) -> Result<Vec<ForestModel>> {
    params.validate()?;
    if targets.nrows() != features.nrows() || seeds.len() != targets.ncols() {
        return Err(PiiError::Dimension("forest targets/features/seeds disagree".into()));
    }
    if features.nrows() == 0 {
        return Err(PiiError::Invalid("forest needs at least one row".into()));
    }
    let pre = Presorted::new(features);
    Ok((0..targets.ncols())
        .into_par_iter()
        .map(|j| fit_presorted(&pre, targets.column(j).as_slice(), params, seeds[j]))
        .collect())
}

/// Fit a single forest.
pub fn rf_fit(features: &DMatrix<f64>, target: &[f64], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    let t = DMatrix::from_column_slice(target.len(), 1, target);
    Ok(rf_fit_many(features, &t, params, &[seed])?.remove(0))
}

pub fn rf_predict(model: &ForestModel, features: &DMatrix<f64>) -> Vec<f64> {
    model.predict(features)
}

fn fit_presorted(pre: &Presorted<'_>, y: &[f64], params: &ForestParams, seed: u64) -> ForestModel {
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, &[t as u64]);
            TreeBuilder::new(pre, y, params).build(&mut rng)
        })
        .collect();
    ForestModel {
        trees,
        n_features: pre.q,
    }
}

struct TreeBuilder<'p, 'a> {
    pre: &'p Presorted<'a>,
    y: &'p [f64],
    params: &'p ForestParams,
    m_try: usize,
    /// recip[k] = 1/k
    recip: Vec<f64>,
}

struct Pending {
    node: usize,
    start: usize,
    end: usize,
    depth: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    n_left: usize,
}

impl<'p, 'a> TreeBuilder<'p, 'a> {
    fn new(pre: &'p Presorted<'a>, y: &'p [f64], params: &'p ForestParams) -> Self {
        Self {
            pre,
            y,
            params,
            m_try: params.m_try.resolve(pre.q),
            recip: (0..=pre.n).map(|k| 1.0 / k as f64).collect(),
        }
    }

    fn subsample_counts<R: Rng>(&self, rng: &mut R) -> (Vec<u32>, usize) {
        let n = self.pre.n;
        let m = ((self.params.max_samples * n as f64).ceil() as usize).clamp(1, n);
        let mut counts = vec![0u32; n];
        if self.params.bootstrap {
            for _ in 0..m {
                counts[rng.random_range(0..n)] += 1;
            }
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            let (chosen, _) = idx.partial_shuffle(rng, m);
            for &i in chosen.iter() {
                counts[i] = 1;
            }
        }
        (counts, m)
    }

    fn build<R: Rng>(&self, rng: &mut R) -> Tree {
        let q = self.pre.q;
        let (counts, m) = self.subsample_counts(rng);
        // lists[f*m .. (f+1)*m]: subsample rows sorted by feature f, duplicates adjacent
        let mut lists = Vec::with_capacity(q * m);
        for f in 0..q {
            for &r in &self.pre.order[f] {
                let c = counts[r as usize] as usize;
                lists.extend(std::iter::repeat_n(r, c));
            }
        }
        let mut goes_left = vec![false; self.pre.n];
        let mut scratch = vec![0u32; m];
        let mut feats: Vec<usize> = (0..q).collect();
        let mut nodes = vec![Node {
            feature: LEAF,
            threshold: 0.0,
            left: LEAF,
            right: LEAF,
            value: 0.0,
        }];
        let mut stack = vec![Pending {
            node: 0,
            start: 0,
            end: m,
            depth: 0,
        }];
        while let Some(job) = stack.pop() {
            let seg = &lists[job.start..job.end];
            let (value, constant) = self.leaf_value(seg);
            nodes[job.node].value = value;
            let count = job.end - job.start;
            let depth_ok = self.params.max_depth.is_none_or(|d| job.depth < d);
            if constant || !depth_ok || count < 2 * self.params.min_leaf {
                continue;
            }
            let (chosen, _) = feats.partial_shuffle(rng, self.m_try);
            let Some(split) = self.best_split(&lists, m, job.start, job.end, chosen) else {
                continue;
            };
            let f = split.feature;
            for &r in &lists[f * m + job.start..f * m + job.end] {
                goes_left[r as usize] = self.pre.value(f, r) <= split.threshold;
            }
            for g in 0..q {
                let seg = &mut lists[g * m + job.start..g * m + job.end];
                if g == f {
                    // already ordered: the left child is a prefix
                    continue;
                }
                let (left_part, right_part) = scratch[..count].split_at_mut(split.n_left);
                let (mut l, mut r) = (0, 0);
                for &row in seg.iter() {
                    if goes_left[row as usize] {
                        left_part[l] = row;
                        l += 1;
                    } else {
                        right_part[r] = row;
                        r += 1;
                    }
                }
                seg.copy_from_slice(&scratch[..count]);
            }
            let left = nodes.len();
            let blank = Node {
                feature: LEAF,
                threshold: 0.0,
                left: LEAF,
                right: LEAF,
                value: 0.0,
            };
            nodes.push(blank);
            nodes.push(blank);
            let node = &mut nodes[job.node];
            node.feature = f as u32;
            node.threshold = split.threshold;
            node.left = left as u32;
            node.right = (left + 1) as u32;
            let mid = job.start + split.n_left;
            stack.push(Pending {
                node: left + 1,
                start: mid,
                end: job.end,
                depth: job.depth + 1,
            });
            stack.push(Pending {
                node: left,
                start: job.start,
                end: mid,
                depth: job.depth + 1,
            });
        }
        Tree { nodes }
    }

    /// Mean target of a node and whether all its targets are identical.
    fn leaf_value(&self, seg: &[u32]) -> (f64, bool) {
        let first = self.y[seg[0] as usize];
        let mut sum = 0.0;
        let mut constant = true;
        for &r in seg {
            let v = self.y[r as usize];
            sum += v;
            constant &= v == first;
        }
        if constant {
            (first, true)
        } else {
            (sum / seg.len() as f64, false)
        }
    }

    fn best_split(&self, lists: &[u32], m: usize, start: usize, end: usize, feats: &[usize]) -> Option<Split> {
        let count = end - start;
        let min_leaf = self.params.min_leaf;
        let seg0 = &lists[start..end];
        let total: f64 = seg0.iter().map(|&r| self.y[r as usize]).sum();
        let total_sq: f64 = seg0.iter().map(|&r| self.y[r as usize].powi(2)).sum();
        let parent = total * total / count as f64;
        let tol = 1e-12 * total_sq.max(f64::MIN_POSITIVE);
        let mut best: Option<(f64, Split)> = None;
        if count < 2 * min_leaf {
            return None;
        }
        let recip = &self.recip;
        for &f in feats {
            let seg = &lists[f * m + start..f * m + end];
            let mut left_sum: f64 = seg[..min_leaf - 1].iter().map(|&r| self.y[r as usize]).sum();
            // candidate boundaries after positions min_leaf-1 ..= count-min_leaf-1
            for i in (min_leaf - 1)..(count - min_leaf) {
                let r = seg[i];
                left_sum += self.y[r as usize];
                let a = self.pre.value(f, r);
                let b = self.pre.value(f, seg[i + 1]);
                if a == b {
                    continue;
                }
                let nl = i + 1;
                let right_sum = total - left_sum;
                let score = left_sum * left_sum * recip[nl] + right_sum * right_sum * recip[count - nl];
                if score - parent > tol && best.as_ref().is_none_or(|(s, _)| score > *s) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid >= b { a } else { mid };
                    best = Some((
                        score,
                        Split {
                            feature: f,
                            threshold,
                            n_left: nl,
                        },
                    ));
                }
            }
        }
        best.map(|(_, s)| s)
    }
}
