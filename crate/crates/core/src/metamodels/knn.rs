use serde::{Deserialize, Serialize};

/// k-nearest-neighbour regressor over standardized profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Knn {
    /// Training rows ordered by distance to `x`; ties keep row order.
    pub fn neighbours(&self, x: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (sq_dist(r, x), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// Unweighted mean of the k nearest targets (k capped at the row count).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let k = self.k.clamp(1, self.rows.len());
        let near = self.neighbours(x);
        near[..k].iter().map(|&i| self.targets[i]).sum::<f64>() / k as f64
    }
}
