use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Borrowed row-major feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct Matrix<'a> {
    data: &'a [f64],
    n_features: usize,
}

impl<'a> Matrix<'a> {
    pub fn new(data: &'a [f64], n_features: usize) -> Result<Self> {
        if n_features == 0 || data.len() % n_features != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form rows of {n_features} features",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tree input features"));
        }
        Ok(Self { data, n_features })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn get(&self, i: usize, f: usize) -> f64 {
        self.data[i * self.n_features + f]
    }
}

/// What a tree is fit to.
#[derive(Debug, Clone, Copy)]
pub enum TreeTarget<'a> {
    /// Weighted Gini impurity over class labels.
    Classes { labels: &'a [usize], n_classes: usize },
    /// Weighted squared error over real targets.
    Values(&'a [f64]),
}

impl TreeTarget<'_> {
    fn len(&self) -> usize {
        match self {
            Self::Classes { labels, .. } => labels.len(),
            Self::Values(y) => y.len(),
        }
    }

    fn stat_width(&self) -> usize {
        match self {
            Self::Classes { n_classes, .. } => *n_classes,
            Self::Values(_) => 2,
        }
    }

    /// Adds row `i` with weight `w` into a sufficient-statistics buffer.
    fn accumulate(&self, stats: &mut [f64], i: usize, w: f64) {
        match self {
            Self::Classes { labels, .. } => stats[labels[i]] += w,
            Self::Values(y) => {
                stats[0] += w * y[i];
                stats[1] += w * y[i] * y[i];
            }
        }
    }

    /// Weighted impurity (not normalized by weight) of a node.
    fn cost(&self, stats: &[f64], weight: f64) -> f64 {
        if weight <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Classes { .. } => weight - stats.iter().map(|w| w * w).sum::<f64>() / weight,
            Self::Values(_) => (stats[1] - stats[0] * stats[0] / weight).max(0.0),
        }
    }

    fn leaf_value(&self, stats: &[f64], weight: f64) -> Vec<f64> {
        match self {
            Self::Classes { .. } => stats.iter().map(|w| w / weight).collect(),
            Self::Values(_) => vec![stats[0] / weight],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    All,
    Sqrt,
}

impl MaxFeatures {
    pub fn count(self, n_features: usize) -> usize {
        match self {
            Self::All => n_features,
            Self::Sqrt => ((n_features as f64).sqrt() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Weighted impurity decrease achieved by this split.
        gain: f64,
    },
    Leaf {
        /// Class distribution, or a single regression value.
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub params: TreeParams,
}

/// A chosen split: feature, threshold and the summed child cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub cost: f64,
}

/// Candidate `b` replaces incumbent `a` only when it is better by more than
/// rounding noise, so earlier (lower feature, lower threshold) wins ties.
pub fn improves(candidate: f64, incumbent: f64, scale: f64) -> bool {
    candidate < incumbent - 1e-10 * (1.0 + scale.abs())
}

struct Builder<'a, 'r> {
    x: Matrix<'a>,
    target: TreeTarget<'a>,
    weights: &'a [f64],
    params: &'a TreeParams,
    rng: Option<&'r mut ChaCha8Rng>,
    nodes: Vec<Node>,
}

impl Builder<'_, '_> {
    fn node_stats(&self, rows: &[usize]) -> (Vec<f64>, f64) {
        let mut stats = vec![0.0; self.target.stat_width()];
        let mut weight = 0.0;
        for &i in rows {
            self.target.accumulate(&mut stats, i, self.weights[i]);
            weight += self.weights[i];
        }
        (stats, weight)
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let k = self.x.n_features();
        let m = self.params.max_features.count(k);
        match self.rng.as_deref_mut() {
            Some(rng) if m < k => {
                let mut f = sample(rng, k, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..k).collect(),
        }
    }

    fn best_split(&mut self, rows: &mut [usize], parent_cost: f64) -> Option<SplitChoice> {
        let min_leaf = self.params.min_samples_leaf.max(1);
        if rows.len() < 2 * min_leaf {
            return None;
        }
        let (total, total_w) = self.node_stats(rows);
        let width = total.len();
        let mut best: Option<SplitChoice> = None;
        let mut best_cost = parent_cost;
        for f in self.candidate_features() {
            rows.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)));
            let mut left = vec![0.0; width];
            let mut right = vec![0.0; width];
            let mut left_w = 0.0;
            for pos in 0..rows.len() - 1 {
                let i = rows[pos];
                self.target.accumulate(&mut left, i, self.weights[i]);
                left_w += self.weights[i];
                let (lo, hi) = (self.x.get(i, f), self.x.get(rows[pos + 1], f));
                if lo == hi || pos + 1 < min_leaf || rows.len() - pos - 1 < min_leaf {
                    continue;
                }
                for c in 0..width {
                    right[c] = total[c] - left[c];
                }
                let cost = self.target.cost(&left, left_w) + self.target.cost(&right, total_w - left_w);
                if improves(cost, best_cost, total_w) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best_cost = cost;
                    best = Some(SplitChoice {
                        feature: f,
                        threshold,
                        cost,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let (stats, weight) = self.node_stats(rows);
        let cost = self.target.cost(&stats, weight);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.target.leaf_value(&stats, weight),
        });
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || cost <= 1e-12 * weight.max(1.0) {
            return id;
        }
        let Some(split) = self.best_split(rows, cost) else {
            return id;
        };
        let f = split.feature;
        rows.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)));
        let cut = rows.partition_point(|&i| self.x.get(i, f) <= split.threshold);
        let (l, r) = rows.split_at_mut(cut);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: f,
            threshold: split.threshold,
            left,
            right,
            gain: cost - split.cost,
        };
        id
    }
}

/// Greedy CART tree. Rows with zero weight are ignored. When `rng` is given
/// and `params.max_features` is below the feature count, each node searches
/// a random feature subset.
pub fn fit_tree(
    x: Matrix<'_>,
    target: TreeTarget<'_>,
    weights: &[f64],
    params: &TreeParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DecisionTree> {
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::invalid("cannot fit a tree on zero rows"));
    }
    if target.len() != n || weights.len() != n {
        return Err(Error::invalid("features, targets and weights differ in length"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    if let TreeTarget::Classes { labels, n_classes } = target {
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
        }
    }
    let mut rows: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::invalid("all sample weights are zero"));
    }
    let mut b = Builder {
        x,
        target,
        weights,
        params,
        rng,
        nodes: Vec::new(),
    };
    b.grow(&mut rows, 0);
    Ok(DecisionTree {
        nodes: b.nodes,
        n_features: x.n_features(),
        params: params.clone(),
    })
}

impl DecisionTree {
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => id = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return id,
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn set_leaf_value(&mut self, id: usize, value: Vec<f64>) {
        if let Node::Leaf { value: v } = &mut self.nodes[id] {
            *v = value;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, id: usize) -> usize {
            match &t.nodes[id] {
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }

    /// Impurity decrease per feature, normalized to sum 1 (all zeros for a
    /// single-leaf tree).
    pub fn feature_importances(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for node in &self.nodes {
            if let Node::Split { feature, gain, .. } = node {
                imp[*feature] += gain.max(0.0);
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }
}
