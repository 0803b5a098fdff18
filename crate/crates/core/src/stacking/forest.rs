use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::StackingError;
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `floor(sqrt(d))`, at least 1.
    pub max_features: Option<usize>,
    /// Draw each tree's rows with replacement. When false every tree sees
    /// the full training set once.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 100,
            max_depth: 8,
            min_leaf: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), StackingError> {
        if self.trees == 0 {
            return Err(StackingError::InvalidConfig("trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(StackingError::InvalidConfig("min_leaf must be >= 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(StackingError::InvalidConfig("max_features must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A single regression tree stored as a flat node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub target_dim: usize,
}

impl ForestModel {
    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.target_dim];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict_row(row)) {
                *o += v;
            }
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

pub(crate) fn fit(x: &Matrix, y: &Matrix, params: &ForestParams) -> Result<ForestModel, StackingError> {
    params.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(StackingError::InsufficientRows { needed: 2, got: n });
    }
    if y.rows() != n {
        return Err(StackingError::DimensionMismatch {
            expected: n,
            actual: y.rows(),
        });
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(StackingError::NonFiniteInput);
    }
    let d = x.cols();
    let mtry = params
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().floor() as usize)
        .clamp(1, d.max(1));

    let trees = exec::map_range(params.trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(exec::derive_seed(params.seed, t as u64));
        let rows: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut b = TreeBuilder {
            x,
            y,
            params,
            mtry,
            rng,
            nodes: Vec::new(),
        };
        b.grow(rows, 0);
        Tree { nodes: b.nodes }
    });
    Ok(ForestModel {
        trees,
        target_dim: y.cols(),
    })
}

struct TreeBuilder<'a> {
    x: &'a Matrix,
    y: &'a Matrix,
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    n_left: usize,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let split = if depth < self.params.max_depth && rows.len() >= 2 * self.params.min_leaf {
            self.best_split(&rows)
        } else {
            None
        };
        match split {
            None => self.nodes[id] = Node::Leaf(self.mean(&rows)),
            Some(s) => {
                let mut sorted = rows;
                sorted.sort_by(|&a, &b| self.x.get(a, s.feature).total_cmp(&self.x.get(b, s.feature)));
                let right_rows = sorted.split_off(s.n_left);
                let left = self.grow(sorted, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                self.nodes[id] = Node::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left,
                    right,
                };
            }
        }
        id
    }

    fn mean(&self, rows: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.y.cols()];
        for &r in rows {
            for (a, v) in m.iter_mut().zip(self.y.row(r)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= rows.len() as f64);
        m
    }

    // Maximizes Σ_t (S_L²/n_L + S_R²/n_R), which is equivalent to minimizing
    // the summed within-child squared error.
    fn best_split(&mut self, rows: &[usize]) -> Option<SplitChoice> {
        let d = self.x.cols();
        let t = self.y.cols();
        let n = rows.len();
        let total: Vec<f64> = (0..t).map(|c| rows.iter().map(|&r| self.y.get(r, c)).sum()).collect();
        let parent_score: f64 = total.iter().map(|s| s * s / n as f64).sum();
        let sq_total: f64 = rows.iter().map(|&r| self.y.row(r).iter().map(|v| v * v).sum::<f64>()).sum();
        let parent_sse = sq_total - parent_score;
        if parent_sse <= 1e-12 * sq_total.max(1.0) {
            return None;
        }

        let features = sample(&mut self.rng, d, self.mtry.min(d)).into_vec();
        let mut best: Option<(f64, SplitChoice)> = None;
        let mut order = rows.to_vec();
        let mut left_sum = vec![0.0; t];
        for f in features {
            order.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)));
            left_sum.iter_mut().for_each(|v| *v = 0.0);
            for i in 1..n {
                for (c, s) in left_sum.iter_mut().enumerate() {
                    *s += self.y.get(order[i - 1], c);
                }
                let (lo, hi) = (self.x.get(order[i - 1], f), self.x.get(order[i], f));
                if lo == hi || i < self.params.min_leaf || n - i < self.params.min_leaf {
                    continue;
                }
                let (nl, nr) = (i as f64, (n - i) as f64);
                let score: f64 = left_sum
                    .iter()
                    .zip(&total)
                    .map(|(l, tot)| l * l / nl + (tot - l).powi(2) / nr)
                    .sum();
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((
                        score,
                        SplitChoice {
                            feature: f,
                            threshold,
                            n_left: i,
                        },
                    ));
                }
            }
        }
        best.filter(|(s, _)| s - parent_score > 1e-12 * parent_sse.max(1e-300))
            .map(|(_, c)| c)
    }
}
