use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{predict, train, ModelKind, ModelSpec, TrainingRow};
use crate::error::{Error, Result};
use crate::evaluation::{kfold_split, kfold_split_grouped, mae};
use crate::seed::SeedHasher;

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: ModelSpec,
    pub best_mae: f64,
    /// Every evaluated point with its cross-validated MAE, in grid order.
    pub evaluated: Vec<(ModelSpec, f64)>,
}

/// Cartesian product of the grid axes on top of the kind's defaults. Axes
/// iterate in key order with the last key varying fastest.
pub fn grid_points(kind: ModelKind, grid: &BTreeMap<String, Vec<f64>>) -> Result<Vec<ModelSpec>> {
    let base = ModelSpec::default_for(kind);
    let mut points = vec![base];
    for (name, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{name}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.hyperparams.insert(name.clone(), *v);
                    q
                })
            })
            .collect();
    }
    for p in &points {
        p.validate()?;
    }
    Ok(points)
}

/// Mean absolute error of `spec` under k-fold CV. Folds group rows by task
/// when there are at least `folds` distinct tasks.
pub fn cross_validated_mae(spec: &ModelSpec, rows: &[TrainingRow], folds: usize, seed: u64) -> Result<f64> {
    let tasks: Vec<&str> = rows.iter().map(|r| r.profile.task_id.as_str()).collect();
    let mut distinct = tasks.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let split_seed = SeedHasher::new(seed).str("grid-cv").finish();
    let splits = if distinct.len() >= folds {
        kfold_split_grouped(&tasks, folds, split_seed)?
    } else {
        kfold_split(rows.len(), folds, split_seed)?
    };
    let mut pairs = Vec::with_capacity(rows.len());
    for (f, (train_idx, test_idx)) in splits.iter().enumerate() {
        let train_rows: Vec<TrainingRow> = train_idx.iter().map(|&i| rows[i].clone()).collect();
        let model = train(spec, &train_rows, SeedHasher::new(seed).str("grid-fit").num(f as u64).finish())?;
        for &i in test_idx {
            pairs.push((predict(&model, &rows[i].profile)?, rows[i].target));
        }
    }
    Ok(mae(&pairs)?.0)
}

/// Exhaustive grid search by cross-validated MAE; ties keep the earlier
/// grid point.
pub fn grid_search(
    kind: ModelKind,
    grid: &BTreeMap<String, Vec<f64>>,
    rows: &[TrainingRow],
    folds: usize,
    seed: u64,
) -> Result<GridResult> {
    let points = grid_points(kind, grid)?;
    let scores: Vec<f64> = points
        .par_iter()
        .map(|p| cross_validated_mae(p, rows, folds, seed))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(GridResult {
        best: points[best].clone(),
        best_mae: scores[best],
        evaluated: points.into_iter().zip(scores).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_rows;
    use super::*;

    fn grid(axes: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        axes.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn points_are_cartesian() {
        let g = grid(&[("max_depth", &[2.0, 4.0]), ("n_trees", &[5.0, 10.0, 20.0])]);
        let pts = grid_points(ModelKind::RandomForest, &g).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].get("n_trees").unwrap(), 10.0);
        assert_eq!(pts[1].get("max_depth").unwrap(), 2.0);
        assert_eq!(pts[3].get("max_depth").unwrap(), 4.0);
        assert!(pts.iter().all(|p| p.get("sampling_ratio").unwrap() == 0.8));
    }

    #[test]
    fn empty_axis_and_bad_values_rejected() {
        assert!(grid_points(ModelKind::Knn, &grid(&[("k", &[])])).is_err());
        assert!(grid_points(ModelKind::Knn, &grid(&[("k", &[0.0])])).is_err());
    }

    #[test]
    fn search_picks_minimum_and_is_deterministic() {
        let rows = random_rows(30, 4, 8);
        let g = grid(&[("k", &[1.0, 3.0, 7.0])]);
        let a = grid_search(ModelKind::Knn, &g, &rows, 3, 2).unwrap();
        let b = grid_search(ModelKind::Knn, &g, &rows, 3, 2).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.evaluated.len(), 3);
        let min = a.evaluated.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_mae, min);
    }
}
