use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use crate::seed::SeedHasher;

/// Bagged regression trees; the prediction is the plain mean over trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    /// Bootstrap size as a fraction of the training rows.
    pub sampling_ratio: f64,
}

pub fn bootstrap_size(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).max(1)
}

impl Forest {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], params: ForestParams, seed: u64) -> Self {
        let n = ys.len();
        let m = bootstrap_size(n, params.sampling_ratio);
        // Each tree owns an rng keyed by its index, so the result does not
        // depend on how rayon schedules the work.
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = SeedHasher::new(seed).str("tree").num(t as u64).rng();
                let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
                RegressionTree::fit(xs, ys, &idx, params.tree)
            })
            .collect();
        Forest { trees }
    }

    pub fn tree_predictions(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}
