//! CART classification trees with Gini impurity.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForestError, Matrix};

/// Decreases at or below this are treated as no improvement, and two
/// candidate splits closer than this are treated as tied.
pub const IMPURITY_EPS: f64 = 1e-13;

/// Gini impurity `2p(1-p)` of a binary label list.
pub fn gini(labels: &[bool]) -> Result<f64, ForestError> {
    if labels.is_empty() {
        return Err(ForestError::EmptyLabels);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok(gini_counts(pos, labels.len()))
}

#[inline]
fn gini_counts(pos: usize, n: usize) -> f64 {
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// A chosen split: rows with `value <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature_index: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Best Gini split over `candidate_features` using midpoints between
/// consecutive distinct values. Ties go to the lowest feature index, then the
/// lowest threshold. `None` when no split has a positive decrease or respects
/// `min_samples_leaf` on both sides.
pub fn best_split(
    rows: &Matrix,
    labels: &[bool],
    candidate_features: &[usize],
    min_samples_leaf: usize,
) -> Option<Split> {
    let all: Vec<usize> = (0..rows.n_rows()).collect();
    let mut candidates = candidate_features.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    best_split_among(
        rows,
        labels,
        &all,
        &candidates,
        min_samples_leaf.max(1),
        true,
        &mut Vec::new(),
    )
}

/// `candidates` must be sorted ascending. With `require_gain` false, a
/// zero-gain split is returned when it is the best valid partition.
pub(crate) fn best_split_among(
    rows: &Matrix,
    labels: &[bool],
    idx: &[usize],
    candidates: &[usize],
    min_leaf: usize,
    require_gain: bool,
    scratch: &mut Vec<(f64, bool)>,
) -> Option<Split> {
    let n = idx.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total_pos = idx.iter().filter(|&&i| labels[i]).count();
    let parent = gini_counts(total_pos, n);
    if parent <= 0.0 {
        return None;
    }
    let nf = n as f64;
    let mut best: Option<Split> = None;
    for &f in candidates {
        scratch.clear();
        scratch.extend(idx.iter().map(|&i| (rows.get(i, f), labels[i])));
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_pos = 0usize;
        for k in 1..n {
            left_pos += usize::from(scratch[k - 1].1);
            let (lo, hi) = (scratch[k - 1].0, scratch[k].0);
            if lo == hi || k < min_leaf || n - k < min_leaf {
                continue;
            }
            let right_pos = total_pos - left_pos;
            let child = (k as f64 / nf) * gini_counts(left_pos, k)
                + ((n - k) as f64 / nf) * gini_counts(right_pos, n - k);
            let decrease = parent - child;
            let better = match best {
                None => !require_gain || decrease > IMPURITY_EPS,
                Some(b) => decrease > b.impurity_decrease + IMPURITY_EPS,
            };
            if better {
                best = Some(Split {
                    feature_index: f,
                    threshold: midpoint(lo, hi),
                    impurity_decrease: decrease,
                });
            }
        }
    }
    best
}

/// Midpoint of `lo < hi` that still sends `hi` to the right.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        prob: f64,
        count: usize,
    },
}

/// Flattened binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Single-leaf tree.
    pub fn leaf(prob: f64, count: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { prob, count }],
        }
    }

    /// Builds a tree from raw nodes, checking that child links point forward and
    /// leaf probabilities lie in `[0, 1]`.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self, ForestError> {
        if nodes.is_empty() {
            return Err(ForestError::Format("tree with no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    left,
                    right,
                    threshold,
                    ..
                } => {
                    if left <= i || right <= i || left >= nodes.len() || right >= nodes.len() {
                        return Err(ForestError::Format(format!(
                            "node {i} has invalid child links"
                        )));
                    }
                    if threshold.is_nan() {
                        return Err(ForestError::Format(format!("node {i} has NaN threshold")));
                    }
                }
                Node::Leaf { prob, .. } => {
                    if !(0.0..=1.0).contains(&prob) {
                        return Err(ForestError::Format(format!(
                            "leaf {i} probability {prob} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Largest feature index referenced by a split.
    pub(crate) fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    fn leaf_for(&self, x: &[f64]) -> (f64, usize) {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
                Node::Leaf { prob, count } => return (prob, count),
            }
        }
    }

    /// Positive fraction of the leaf `x` falls into.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_for(x).0
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Leaf { prob, count } => Some((prob, count)),
            Node::Split { .. } => None,
        })
    }
}

/// Growth parameters for one tree.
pub(crate) struct GrowParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
}

/// Grows a tree on the rows listed in `idx` (repeats allowed, as produced by bootstrap).
pub(crate) fn grow<R: Rng>(
    rows: &Matrix,
    labels: &[bool],
    idx: Vec<usize>,
    params: &GrowParams,
    rng: &mut R,
) -> DecisionTree {
    let mut builder = Builder {
        rows,
        labels,
        params,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(idx.len()),
        features: Vec::with_capacity(rows.n_cols()),
    };
    builder.build(idx, 0, rng);
    DecisionTree {
        nodes: builder.nodes,
    }
}

struct Builder<'a> {
    rows: &'a Matrix,
    labels: &'a [bool],
    params: &'a GrowParams,
    nodes: Vec<Node>,
    scratch: Vec<(f64, bool)>,
    features: Vec<usize>,
}

impl Builder<'_> {
    fn build<R: Rng>(&mut self, idx: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let at = self.nodes.len();
        let pos = idx.iter().filter(|&&i| self.labels[i]).count();
        let leaf = Node::Leaf {
            prob: pos as f64 / idx.len() as f64,
            count: idx.len(),
        };
        self.nodes.push(leaf);
        let depth_left = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_left || pos == 0 || pos == idx.len() {
            return at;
        }
        let n_features = self.rows.n_cols();
        let k = self.params.features_per_split.min(n_features);
        self.features.clear();
        if k == n_features {
            self.features.extend(0..n_features);
        } else {
            self.features.extend(index::sample(rng, n_features, k));
            self.features.sort_unstable();
        }
        // Impure nodes take zero-gain splits too, and fall back to the
        // unsampled features when the sampled ones admit no partition.
        let features = std::mem::take(&mut self.features);
        let min_leaf = self.params.min_samples_leaf;
        let mut split = best_split_among(
            self.rows,
            self.labels,
            &idx,
            &features,
            min_leaf,
            false,
            &mut self.scratch,
        );
        if split.is_none() && k < n_features {
            let rest: Vec<usize> = (0..n_features)
                .filter(|f| features.binary_search(f).is_err())
                .collect();
            split = best_split_among(
                self.rows,
                self.labels,
                &idx,
                &rest,
                min_leaf,
                false,
                &mut self.scratch,
            );
        }
        self.features = features;
        let Some(split) = split else {
            return at;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.rows.get(i, split.feature_index) <= split.threshold);
        let left = self.build(left_idx, depth + 1, rng);
        let right = self.build(right_idx, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature: split.feature_index,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}
