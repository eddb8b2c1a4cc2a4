//! Gradient-boosted regression trees under squared loss.
//!
//! Each round fits a tree to the current residuals on a row subsample,
//! then sets every leaf to the mean residual of *all* training rows that
//! reach it. With shrinkage in (0, 1] a round can only lower the
//! training MSE: inside a leaf, shifting predictions by `lr * mean`
//! removes `(2 lr - lr^2) * count * mean^2` of squared error.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use crate::seed::SeedHasher;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Training MSE before the first round and after each round.
    pub train_mse: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub tree: TreeParams,
    pub learning_rate: f64,
    pub sampling_ratio: f64,
}

fn mse(pred: &[f64], ys: &[f64]) -> f64 {
    pred.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / ys.len() as f64
}

impl Gbt {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], params: GbtParams, seed: u64) -> Self {
        let n = ys.len();
        let base = ys.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut train_mse = vec![mse(&pred, ys)];
        let mut trees = Vec::with_capacity(params.n_rounds);
        let m = super::forest::bootstrap_size(n, params.sampling_ratio).min(n);
        let mut rng = SeedHasher::new(seed).str("gbt-rows").rng();
        let mut residual = vec![0.0; n];
        for _ in 0..params.n_rounds {
            for i in 0..n {
                residual[i] = ys[i] - pred[i];
            }
            let mut rows = sample(&mut rng, n, m).into_vec();
            rows.sort_unstable();
            let mut tree = RegressionTree::fit(xs, &residual, &rows, params.tree);

            let leaves: Vec<usize> = xs.iter().map(|x| tree.leaf_of(x)).collect();
            let mut sums = vec![0.0; tree.nodes.len()];
            let mut counts = vec![0usize; tree.nodes.len()];
            for (i, &leaf) in leaves.iter().enumerate() {
                sums[leaf] += residual[i];
                counts[leaf] += 1;
            }
            for (node, &c) in counts.iter().enumerate() {
                if c > 0 {
                    tree.set_leaf(node, sums[node] / c as f64);
                }
            }
            let next: Vec<f64> = leaves
                .iter()
                .zip(&pred)
                .map(|(&leaf, p)| p + params.learning_rate * (sums[leaf] / counts[leaf] as f64))
                .collect();
            let next_mse = mse(&next, ys);
            let prev_mse = *train_mse.last().expect("seeded with the base loss");
            if next_mse <= prev_mse {
                pred = next;
                train_mse.push(next_mse);
            } else {
                // Only reachable through rounding once residual means are ~0;
                // the round is kept as a no-op tree.
                for node in 0..tree.nodes.len() {
                    tree.set_leaf(node, 0.0);
                }
                train_mse.push(prev_mse);
            }
            trees.push(tree);
        }
        Gbt {
            base,
            learning_rate: params.learning_rate,
            trees,
            train_mse,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_staged(x, self.trees.len())
    }

    /// Prediction using only the first `rounds` trees. Accumulates in the
    /// same order as training, so it reproduces training predictions
    /// bit for bit.
    pub fn predict_staged(&self, x: &[f64], rounds: usize) -> f64 {
        let mut p = self.base;
        for t in &self.trees[..rounds.min(self.trees.len())] {
            p += self.learning_rate * t.predict(x);
        }
        p
    }
}
