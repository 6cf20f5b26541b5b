//! Axis-aligned regression tree over processed inputs, targeting
//! nonconformity scores.
//!
//! Fitting is classic greedy CART: at each node, every feature and every
//! midpoint between consecutive distinct sorted values is a candidate, and
//! the split minimizing n_L·Var(R_L) + n_R·Var(R_R) wins. Ties prefer the
//! lower feature index, then the lower threshold; queries descend with
//! x[dim] ≤ threshold going left. Leaves are numbered densely in depth-first
//! pre-order, left child first.
//!
//! Determinism is part of the contract: all reductions run in
//! permutation-invariant order (per-feature pairs sorted by (value, score),
//! node statistics from the feature-0 ordering), so fitting the same multiset
//! of samples always produces bit-identical trees, regardless of input order
//! or thread count.
//!
//! Leaves carry a threshold quantile `q_hat` and a scaling factor `xi`,
//! both +∞ until calibration fills them in.

use std::path::Path;

use crate::error::{Error, Result};

/// Relative variance-reduction floor below which a node refuses to split.
const MIN_GAIN_FRAC: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig::with_leaf_size(13, 300)
    }
}

impl TreeConfig {
    /// Config with the conventional `min_samples_split = 2 · min_samples_leaf`.
    pub fn with_leaf_size(max_depth: usize, min_samples_leaf: usize) -> Self {
        TreeConfig {
            max_depth,
            min_samples_leaf,
            min_samples_split: 2 * min_samples_leaf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Config("tree max depth must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min samples per leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        dim: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        n_samples: usize,
        q_hat: f64,
        xi: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    /// Node index of each leaf, by leaf id.
    leaf_index: Vec<usize>,
}

/// Split threshold between two consecutive distinct values a < b: their
/// midpoint, pulled back to a if rounding lands on b, so that `x ≤ threshold`
/// keeps exactly the samples at or below a on the left.
fn midpoint_below(a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    if mid >= b {
        a
    } else {
        mid
    }
}

struct Fitter<'a> {
    xs: &'a [Vec<f64>],
    rs: &'a [f64],
    cfg: TreeConfig,
    d: usize,
    nodes: Vec<Node>,
    next_leaf: usize,
}

impl Fitter<'_> {
    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let n = idx.len();
        if depth >= self.cfg.max_depth || n < self.cfg.min_samples_split {
            return self.emit_leaf(n);
        }

        // Per-feature sample pairs sorted by (value, score): this ordering
        // depends only on the multiset of samples, never on input order.
        let sorted: Vec<Vec<(f64, f64)>> = (0..self.d)
            .map(|f| {
                let mut pairs: Vec<(f64, f64)> =
                    idx.iter().map(|&i| (self.xs[i][f], self.rs[i])).collect();
                pairs.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
                pairs
            })
            .collect();

        // Node statistics in the canonical feature-0 order.
        let mean = sorted[0].iter().map(|p| p.1).sum::<f64>() / n as f64;
        let node_ss: f64 = sorted[0].iter().map(|p| (p.1 - mean) * (p.1 - mean)).sum();

        let mut best: Option<(f64, usize, f64)> = None; // (objective, dim, threshold)
        for (f, pairs) in sorted.iter().enumerate() {
            let total_sum: f64 = pairs.iter().map(|p| p.1 - mean).sum();
            let total_ss: f64 = pairs.iter().map(|p| (p.1 - mean) * (p.1 - mean)).sum();
            let mut acc_sum = 0.0;
            let mut acc_ss = 0.0;
            for t in 1..n {
                let cr = pairs[t - 1].1 - mean;
                acc_sum += cr;
                acc_ss += cr * cr;
                if !(pairs[t].0 > pairs[t - 1].0) {
                    continue;
                }
                if t < self.cfg.min_samples_leaf || n - t < self.cfg.min_samples_leaf {
                    continue;
                }
                let tl = t as f64;
                let tr = (n - t) as f64;
                let ss_l = acc_ss - acc_sum * acc_sum / tl;
                let rsum = total_sum - acc_sum;
                let ss_r = (total_ss - acc_ss) - rsum * rsum / tr;
                let obj = ss_l + ss_r;
                if best.map_or(true, |(b, _, _)| obj < b) {
                    best = Some((obj, f, midpoint_below(pairs[t - 1].0, pairs[t].0)));
                }
            }
        }

        let Some((obj, dim, threshold)) = best else {
            return self.emit_leaf(n);
        };
        if node_ss - obj <= MIN_GAIN_FRAC * node_ss {
            return self.emit_leaf(n);
        }

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.xs[i][dim] <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Internal {
            dim,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(left_idx, depth + 1);
        let right = self.build(right_idx, depth + 1);
        if let Node::Internal {
            left: l, right: r, ..
        } = &mut self.nodes[me]
        {
            *l = left;
            *r = right;
        }
        me
    }

    fn emit_leaf(&mut self, n_samples: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            leaf_id: self.next_leaf,
            n_samples,
            q_hat: f64::INFINITY,
            xi: f64::INFINITY,
        });
        self.next_leaf += 1;
        id
    }
}

/// Fit a tree minimizing within-leaf score variance. Leaf `q_hat`/`xi` come
/// out as +∞; calibration fills them.
pub fn fit_tree(xs: &[Vec<f64>], rs: &[f64], cfg: &TreeConfig) -> Result<RegressionTree> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::Config("cannot fit a tree on no samples".into()));
    }
    if xs.len() != rs.len() {
        return Err(Error::Config(format!(
            "tree fit got {} inputs and {} scores",
            xs.len(),
            rs.len()
        )));
    }
    let d = xs[0].len();
    if d == 0 {
        return Err(Error::Config("tree inputs need at least one feature".into()));
    }
    for (i, x) in xs.iter().enumerate() {
        if x.len() != d {
            return Err(Error::Config(format!(
                "tree input {i} has {} features, expected {d}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tree input {i} is not finite")));
        }
    }
    if let Some(i) = rs.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite")));
    }

    let mut fitter = Fitter {
        xs,
        rs,
        cfg: *cfg,
        d,
        nodes: Vec::new(),
        next_leaf: 0,
    };
    let idx: Vec<usize> = (0..xs.len()).collect();
    fitter.build(idx, 0);
    Ok(RegressionTree::from_nodes(fitter.nodes))
}

impl RegressionTree {
    fn from_nodes(nodes: Vec<Node>) -> Self {
        let n_leaves = nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count();
        let mut leaf_index = vec![usize::MAX; n_leaves];
        for (i, node) in nodes.iter().enumerate() {
            if let Node::Leaf { leaf_id, .. } = node {
                leaf_index[*leaf_id] = i;
            }
        }
        RegressionTree { nodes, leaf_index }
    }

    /// Tree with one leaf covering the whole input space.
    pub fn single_leaf(n_samples: usize, q_hat: f64, xi: f64) -> Self {
        RegressionTree::from_nodes(vec![Node::Leaf {
            leaf_id: 0,
            n_samples,
            q_hat,
            xi,
        }])
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_index.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Leaf containing x. Descends with the ≤-goes-left convention.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Internal {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*dim] <= *threshold { *left } else { *right };
                }
                Node::Leaf { leaf_id, .. } => return *leaf_id,
            }
        }
    }

    /// (n_samples, q_hat, xi) stored at a leaf.
    pub fn leaf_values(&self, leaf_id: usize) -> (usize, f64, f64) {
        match &self.nodes[self.leaf_index[leaf_id]] {
            Node::Leaf {
                n_samples,
                q_hat,
                xi,
                ..
            } => (*n_samples, *q_hat, *xi),
            Node::Internal { .. } => unreachable!("leaf_index points at leaves"),
        }
    }

    pub fn set_leaf_values(&mut self, leaf_id: usize, n_samples: usize, q_hat: f64, xi: f64) {
        let at = self.leaf_index[leaf_id];
        if let Node::Leaf {
            n_samples: n,
            q_hat: q,
            xi: x,
            ..
        } = &mut self.nodes[at]
        {
            *n = n_samples;
            *q = q_hat;
            *x = xi;
        }
    }

    /// Scaling factor of the leaf containing x.
    pub fn xi_of(&self, x: &[f64]) -> f64 {
        self.leaf_values(self.leaf_of(x)).2
    }

    fn fmt_stat(v: f64) -> String {
        if v.is_infinite() {
            "inf".to_string()
        } else {
            format!("{v:.16e}")
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("OTREE 1 {} {}\n", self.nodes.len(), self.n_leaves());
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Internal {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    out.push_str(&format!("I {id} {dim} {threshold:.16e} {left} {right}\n"));
                }
                Node::Leaf {
                    leaf_id,
                    n_samples,
                    q_hat,
                    xi,
                } => {
                    out.push_str(&format!(
                        "L {id} {leaf_id} {n_samples} {} {}\n",
                        Self::fmt_stat(*q_hat),
                        Self::fmt_stat(*xi)
                    ));
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("tree file: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let hf: Vec<&str> = header.split_whitespace().collect();
        if hf.len() != 4 || hf[0] != "OTREE" {
            return Err(bad(format!("bad header {header:?}")));
        }
        if hf[1] != "1" {
            return Err(bad(format!("unsupported version {}", hf[1])));
        }
        let n_nodes: usize = hf[2].parse().map_err(|_| bad("bad node count".into()))?;
        let n_leaves: usize = hf[3].parse().map_err(|_| bad("bad leaf count".into()))?;
        if n_nodes == 0 {
            return Err(bad("a tree needs at least one node".into()));
        }

        let parse_stat = |s: &str| -> Result<f64> {
            if s == "inf" {
                return Ok(f64::INFINITY);
            }
            let v: f64 = s.parse().map_err(|_| bad(format!("bad value {s:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("leaf statistic {v} out of range")));
            }
            Ok(v)
        };

        let mut nodes = Vec::with_capacity(n_nodes);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first() {
                Some(&"I") => {
                    if f.len() != 6 {
                        return Err(bad(format!("internal node needs 6 fields: {line:?}")));
                    }
                    let id: usize = f[1].parse().map_err(|_| bad("bad node id".into()))?;
                    if id != nodes.len() {
                        return Err(bad(format!("node id {id} out of order")));
                    }
                    let dim = f[2].parse().map_err(|_| bad("bad split dim".into()))?;
                    let threshold: f64 =
                        f[3].parse().map_err(|_| bad("bad threshold".into()))?;
                    if !threshold.is_finite() {
                        return Err(bad(format!("threshold {threshold} not finite")));
                    }
                    let left: usize = f[4].parse().map_err(|_| bad("bad child id".into()))?;
                    let right: usize = f[5].parse().map_err(|_| bad("bad child id".into()))?;
                    if left >= n_nodes || right >= n_nodes || left == id || right == id {
                        return Err(bad(format!("child ids {left}/{right} out of range")));
                    }
                    nodes.push(Node::Internal {
                        dim,
                        threshold,
                        left,
                        right,
                    });
                }
                Some(&"L") => {
                    if f.len() != 6 {
                        return Err(bad(format!("leaf needs 6 fields: {line:?}")));
                    }
                    let id: usize = f[1].parse().map_err(|_| bad("bad node id".into()))?;
                    if id != nodes.len() {
                        return Err(bad(format!("node id {id} out of order")));
                    }
                    let leaf_id: usize = f[2].parse().map_err(|_| bad("bad leaf id".into()))?;
                    if leaf_id >= n_leaves {
                        return Err(bad(format!("leaf id {leaf_id} exceeds count {n_leaves}")));
                    }
                    let n_samples = f[3].parse().map_err(|_| bad("bad sample count".into()))?;
                    nodes.push(Node::Leaf {
                        leaf_id,
                        n_samples,
                        q_hat: parse_stat(f[4])?,
                        xi: parse_stat(f[5])?,
                    });
                }
                _ => return Err(bad(format!("unrecognized line {line:?}"))),
            }
        }
        if nodes.len() != n_nodes {
            return Err(bad(format!(
                "header promised {n_nodes} nodes, file has {}",
                nodes.len()
            )));
        }
        let mut seen = vec![false; n_leaves];
        for node in &nodes {
            if let Node::Leaf { leaf_id, .. } = node {
                if seen[*leaf_id] {
                    return Err(bad(format!("duplicate leaf id {leaf_id}")));
                }
                seen[*leaf_id] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("leaf ids are not dense".into()));
        }
        Ok(RegressionTree::from_nodes(nodes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        RegressionTree::from_text(&text)
    }
}
