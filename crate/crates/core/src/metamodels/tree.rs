//! CART regression tree: variance-reduction splits found by an exhaustive
//! scan over every feature's sorted distinct values.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

struct Best {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    /// Fits on the rows named by `indices` (duplicates allowed, as in a
    /// bootstrap sample).
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], indices: &[usize], params: TreeParams) -> Self {
        assert!(!indices.is_empty(), "cannot fit a tree on zero rows");
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut idx = indices.to_vec();
        tree.grow(xs, ys, &mut idx, 0, params);
        tree
    }

    fn grow(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[f64],
        idx: &mut [usize],
        depth: usize,
        params: TreeParams,
    ) -> usize {
        let id = self.nodes.len();
        let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });
        if depth >= params.max_depth || idx.len() < 2 * params.min_leaf.max(1) {
            return id;
        }
        let Some(best) = best_split(xs, ys, idx, params.min_leaf.max(1)) else {
            return id;
        };
        // Partition in place: left rows first, order preserved within sides.
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| xs[i][best.feature] < best.threshold);
        let n_left = left.len();
        idx[..n_left].copy_from_slice(&left);
        idx[n_left..].copy_from_slice(&right);
        let (l, r) = idx.split_at_mut(n_left);
        let left_id = self.grow(xs, ys, l, depth + 1, params);
        let right_id = self.grow(xs, ys, r, depth + 1, params);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: left_id,
            right: right_id,
        };
        id
    }

    /// Index of the leaf node `x` lands in.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_of(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_of returns leaves"),
        }
    }

    pub fn set_leaf(&mut self, node: usize, value: f64) {
        if let Node::Leaf { value: v } = &mut self.nodes[node] {
            *v = value;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

fn best_split(xs: &[Vec<f64>], ys: &[f64], idx: &[usize], min_leaf: usize) -> Option<Best> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| ys[i]).sum();
    let base = total * total / n as f64;
    let n_features = xs[idx[0]].len();
    let mut best: Option<Best> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    #[allow(clippy::needless_range_loop)]
    for f in 0..n_features {
        order.clear();
        order.extend(idx.iter().map(|&i| (xs[i][f], ys[i])));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        if order[0].0 == order[n - 1].0 {
            continue;
        }
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += order[k].1;
            let n_left = k + 1;
            // Only cut between distinct values.
            if order[k].0 == order[k + 1].0 {
                continue;
            }
            if n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / n_left as f64
                + right_sum * right_sum / (n - n_left) as f64;
            let gain = score - base;
            if gain > 1e-12 * (1.0 + base.abs()) && best.as_ref().is_none_or(|b| gain > b.gain) {
                let (a, b) = (order[k].0, order[k + 1].0);
                let mut threshold = a + (b - a) * 0.5;
                // Midpoint can round onto `a` when the values are adjacent floats.
                if threshold <= a {
                    threshold = b;
                }
                best = Some(Best {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}
