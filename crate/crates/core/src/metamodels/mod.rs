//! Meta-model regressors mapping a feature profile to estimated F1.
//!
//! Four kinds are available: k-nearest neighbours, a one-hidden-layer MLP,
//! a random forest, and gradient-boosted trees. k-NN and the MLP see
//! z-scored inputs (training-set statistics); the tree models consume raw
//! profiles. Predictions are clipped to `[0, 1]`.

pub mod forest;
pub mod gbt;
mod grid;
pub mod knn;
pub mod mlp;
mod persist;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::profile::FeatureProfile;
use crate::seed::SeedHasher;

pub use grid::{cross_validated_mae, grid_points, grid_search, GridResult};
pub use persist::{load_model, model_from_str, model_to_string, save_model, MODEL_FORMAT, MODEL_VERSION};

use forest::{Forest, ForestParams};
use gbt::{Gbt, GbtParams};
use knn::Knn;
use mlp::{Mlp, MlpParams};
use tree::TreeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Knn,
    Mlp,
    RandomForest,
    Gbt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Knn,
        ModelKind::Mlp,
        ModelKind::RandomForest,
        ModelKind::Gbt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Knn => "KNN",
            ModelKind::Mlp => "MLP",
            ModelKind::RandomForest => "RANDOM_FOREST",
            ModelKind::Gbt => "GBT",
        }
    }

    pub fn required(self) -> &'static [&'static str] {
        match self {
            ModelKind::Knn => &["k"],
            ModelKind::Mlp => &["hidden_width", "learning_rate", "epochs"],
            ModelKind::RandomForest => &["max_depth", "n_trees", "sampling_ratio"],
            ModelKind::Gbt => &["max_depth", "n_rounds", "learning_rate", "sampling_ratio"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "KNN" => Ok(ModelKind::Knn),
            "MLP" => Ok(ModelKind::Mlp),
            "RANDOM_FOREST" | "RF" => Ok(ModelKind::RandomForest),
            "GBT" | "XGBOOST" => Ok(ModelKind::Gbt),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A model kind plus its hyperparameters. Integer hyperparameters are
/// stored as whole-valued reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hyperparams: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hyperparams: &[(&str, f64)]) -> Self {
        ModelSpec {
            kind,
            hyperparams: hyperparams.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn knn(k: usize) -> Self {
        Self::new(ModelKind::Knn, &[("k", k as f64)])
    }

    pub fn mlp(hidden_width: usize, learning_rate: f64, epochs: usize) -> Self {
        Self::new(
            ModelKind::Mlp,
            &[
                ("hidden_width", hidden_width as f64),
                ("learning_rate", learning_rate),
                ("epochs", epochs as f64),
            ],
        )
    }

    pub fn random_forest(max_depth: usize, n_trees: usize, sampling_ratio: f64) -> Self {
        Self::new(
            ModelKind::RandomForest,
            &[
                ("max_depth", max_depth as f64),
                ("n_trees", n_trees as f64),
                ("sampling_ratio", sampling_ratio),
            ],
        )
    }

    pub fn gbt(max_depth: usize, n_rounds: usize, learning_rate: f64, sampling_ratio: f64) -> Self {
        Self::new(
            ModelKind::Gbt,
            &[
                ("max_depth", max_depth as f64),
                ("n_rounds", n_rounds as f64),
                ("learning_rate", learning_rate),
                ("sampling_ratio", sampling_ratio),
            ],
        )
    }

    /// Defaults: 3-NN; MLP of width 64, rate 1e-2, 2000 epochs; forest of
    /// 260 depth-10 trees on 0.8 bootstraps; boosting with depth 4, 200
    /// rounds, rate 0.1, 0.8 row sampling.
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Knn => Self::knn(3),
            ModelKind::Mlp => Self::mlp(64, 1e-2, 2000),
            ModelKind::RandomForest => Self::random_forest(10, 260, 0.8),
            ModelKind::Gbt => Self::gbt(4, 200, 0.1, 0.8),
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.hyperparams.get(name).copied().ok_or_else(|| {
            Error::Config(format!("{} spec is missing hyperparameter `{name}`", self.kind))
        })
    }

    fn count(&self, name: &str, min: usize) -> Result<usize> {
        let v = self.get(name)?;
        if v.fract() != 0.0 || v < min as f64 || !v.is_finite() {
            return Err(Error::Config(format!(
                "`{name}` must be an integer >= {min}, got {v}"
            )));
        }
        Ok(v as usize)
    }

    fn unit(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config(format!("`{name}` must be in (0, 1], got {v}")));
        }
        Ok(v)
    }

    fn optional_count(&self, name: &str, default: usize, min: usize) -> Result<usize> {
        if self.hyperparams.contains_key(name) {
            self.count(name, min)
        } else {
            Ok(default)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Knn => {
                self.count("k", 1)?;
            }
            ModelKind::Mlp => {
                self.mlp_params()?;
            }
            ModelKind::RandomForest => {
                self.forest_params()?;
            }
            ModelKind::Gbt => {
                self.gbt_params()?;
            }
        }
        Ok(())
    }

    fn tree_params(&self) -> Result<TreeParams> {
        Ok(TreeParams {
            max_depth: self.count("max_depth", 0)?,
            min_leaf: self.optional_count("min_leaf", 2, 1)?,
        })
    }

    fn forest_params(&self) -> Result<ForestParams> {
        Ok(ForestParams {
            n_trees: self.count("n_trees", 1)?,
            tree: self.tree_params()?,
            sampling_ratio: self.unit("sampling_ratio")?,
        })
    }

    fn gbt_params(&self) -> Result<GbtParams> {
        Ok(GbtParams {
            n_rounds: self.count("n_rounds", 0)?,
            tree: self.tree_params()?,
            learning_rate: self.unit("learning_rate")?,
            sampling_ratio: self.unit("sampling_ratio")?,
        })
    }

    fn mlp_params(&self) -> Result<MlpParams> {
        let learning_rate = self.get("learning_rate")?;
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "`learning_rate` must be positive, got {learning_rate}"
            )));
        }
        Ok(MlpParams {
            hidden: self.count("hidden_width", 1)?,
            learning_rate,
            epochs: self.count("epochs", 0)?,
            tolerance: self.hyperparams.get("tolerance").copied().unwrap_or(1e-8),
        })
    }

    /// Compact `kind(k=v, ...)` label used in reports.
    pub fn label(&self) -> String {
        let params: Vec<String> = self
            .hyperparams
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!("{}({})", self.kind, params.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub profile: FeatureProfile,
    /// True task-level performance of the profiled setting.
    pub target: f64,
}

/// Per-column z-score statistics from the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let n = xs.len() as f64;
        let dims = xs[0].len();
        let mut mean = vec![0.0; dims];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; dims];
        for x in xs {
            for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
        }
        Standardizer { mean, std }
    }

    /// Constant columns pass through centred but unscaled.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { v - m })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Knn(Knn),
    Mlp(Mlp),
    RandomForest(Forest),
    Gbt(Gbt),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedMetaModel {
    pub spec: ModelSpec,
    pub kinds: Vec<FeatureKind>,
    pub dims: usize,
    pub standardization: Standardizer,
    pub seed: u64,
    pub params: ModelParams,
}

fn check_rows(rows: &[TrainingRow]) -> Result<(Vec<FeatureKind>, usize)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InsufficientData("no training rows".into()))?;
    first.profile.validate()?;
    for (i, r) in rows.iter().enumerate() {
        if r.profile.kinds != first.profile.kinds || r.profile.dims != first.profile.dims {
            return Err(Error::Shape(format!(
                "training row {i} has kinds {:?} x {} dims, expected {:?} x {}",
                r.profile.kinds, r.profile.dims, first.profile.kinds, first.profile.dims
            )));
        }
        if r.profile.vector.len() != first.profile.vector.len() {
            return Err(Error::Shape(format!("training row {i} has a malformed vector")));
        }
        if !(0.0..=1.0).contains(&r.target) {
            return Err(Error::invalid(
                "target",
                format!("training row {i} target {} is outside [0, 1]", r.target),
            ));
        }
    }
    Ok((first.profile.kinds.clone(), first.profile.dims))
}

/// Fits a meta-model. Deterministic in `(spec, rows, seed)`.
pub fn train(spec: &ModelSpec, rows: &[TrainingRow], seed: u64) -> Result<TrainedMetaModel> {
    spec.validate()?;
    let (kinds, dims) = check_rows(rows)?;
    let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.profile.vector.clone()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let standardization = Standardizer::fit(&raw);
    let stream = SeedHasher::new(seed).str(spec.kind.as_str());
    let params = match spec.kind {
        ModelKind::Knn => ModelParams::Knn(Knn {
            k: spec.count("k", 1)?,
            rows: raw.iter().map(|x| standardization.apply(x)).collect(),
            targets: ys,
        }),
        ModelKind::Mlp => {
            let xs: Vec<Vec<f64>> = raw.iter().map(|x| standardization.apply(x)).collect();
            let mut rng = stream.rng();
            ModelParams::Mlp(Mlp::fit(&xs, &ys, spec.mlp_params()?, &mut rng))
        }
        ModelKind::RandomForest => {
            ModelParams::RandomForest(Forest::fit(&raw, &ys, spec.forest_params()?, stream.finish()))
        }
        ModelKind::Gbt => ModelParams::Gbt(Gbt::fit(&raw, &ys, spec.gbt_params()?, stream.finish())),
    };
    Ok(TrainedMetaModel {
        spec: spec.clone(),
        kinds,
        dims,
        standardization,
        seed,
        params,
    })
}

impl TrainedMetaModel {
    fn check(&self, profile: &FeatureProfile) -> Result<()> {
        if profile.kinds != self.kinds || profile.dims != self.dims {
            return Err(Error::Shape(format!(
                "model expects kinds {:?} x {} dims, profile has {:?} x {}",
                self.kinds, self.dims, profile.kinds, profile.dims
            )));
        }
        if profile.vector.len() != self.kinds.len() * self.dims {
            return Err(Error::Shape("profile vector length does not match its header".into()));
        }
        Ok(())
    }

    /// Unclipped model output.
    pub fn predict_raw(&self, profile: &FeatureProfile) -> Result<f64> {
        self.check(profile)?;
        let x = &profile.vector;
        Ok(match &self.params {
            ModelParams::Knn(m) => m.predict(&self.standardization.apply(x)),
            ModelParams::Mlp(m) => m.predict(&self.standardization.apply(x)),
            ModelParams::RandomForest(m) => m.predict(x),
            ModelParams::Gbt(m) => m.predict(x),
        })
    }

    pub fn predict(&self, profile: &FeatureProfile) -> Result<f64> {
        predict(self, profile)
    }
}

/// Estimated performance for one profile, clipped to `[0, 1]`.
pub fn predict(model: &TrainedMetaModel, profile: &FeatureProfile) -> Result<f64> {
    let raw = model.predict_raw(profile)?;
    Ok(if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) })
}

/// Rows belonging to one service, for per-service meta-models.
pub fn rows_for_service<'a>(rows: &'a [TrainingRow], service_id: &str) -> Vec<&'a TrainingRow> {
    rows.iter().filter(|r| r.profile.service_id == service_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn profile(vector: Vec<f64>, task: &str) -> FeatureProfile {
        FeatureProfile {
            service_id: "s".into(),
            task_id: task.into(),
            context_id: "c".into(),
            kinds: vec![FeatureKind::Nll],
            dims: vector.len(),
            vector,
        }
    }

    pub(crate) fn random_rows(n: usize, dims: usize, seed: u64) -> Vec<TrainingRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dims).map(|_| rng.random_range(-2.0..2.0)).collect();
                let target = (0.5 + 0.2 * v[0] - 0.1 * v[1 % dims]).clamp(0.0, 1.0);
                TrainingRow {
                    profile: profile(v, &format!("t{}", i % 7)),
                    target,
                }
            })
            .collect()
    }

    fn small_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::knn(3),
            ModelSpec::mlp(8, 0.05, 200),
            ModelSpec::random_forest(4, 20, 0.8),
            ModelSpec::gbt(3, 30, 0.1, 0.8),
        ]
    }

    #[test]
    fn one_nn_reproduces_targets() {
        let rows = random_rows(40, 6, 1);
        let m = train(&ModelSpec::knn(1), &rows, 0).unwrap();
        for r in &rows {
            assert_eq!(predict(&m, &r.profile).unwrap(), r.target);
        }
    }

    #[test]
    fn knn_unweighted_mean_of_three() {
        // Raw equidistant layout with unit-variance columns by symmetry.
        let rows = vec![
            TrainingRow { profile: profile(vec![1.0, 0.0], "a"), target: 0.2 },
            TrainingRow { profile: profile(vec![-1.0, 0.0], "a"), target: 0.4 },
            TrainingRow { profile: profile(vec![0.0, 1.0], "a"), target: 0.6 },
            TrainingRow { profile: profile(vec![0.0, -1.0], "a"), target: 0.6 },
        ];
        let m = train(&ModelSpec::knn(3), &rows, 0).unwrap();
        // All four rows are equidistant from the origin; ties go to the
        // lowest row index, so rows 0, 1, 2 are used.
        let est = predict(&m, &profile(vec![0.0, 0.0], "a")).unwrap();
        assert!((est - 0.4).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_forest() {
        let mut rows = random_rows(50, 5, 2);
        for r in &mut rows {
            r.target = 0.7;
        }
        let m = train(&ModelSpec::random_forest(10, 30, 0.8), &rows, 3).unwrap();
        for r in random_rows(20, 5, 9) {
            assert!((predict(&m, &r.profile).unwrap() - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rounds_boosting_predicts_mean() {
        let rows = random_rows(30, 4, 5);
        let mean = rows.iter().map(|r| r.target).sum::<f64>() / rows.len() as f64;
        let m = train(&ModelSpec::gbt(4, 0, 0.1, 0.8), &rows, 0).unwrap();
        for r in random_rows(10, 4, 6) {
            assert!((predict(&m, &r.profile).unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn boosting_loss_never_increases() {
        let rows = random_rows(80, 5, 11);
        for ratio in [1.0, 0.8, 0.5] {
            let m = train(&ModelSpec::gbt(3, 60, 0.3, ratio), &rows, 4).unwrap();
            let ModelParams::Gbt(g) = &m.params else { unreachable!() };
            let xs: Vec<&Vec<f64>> = rows.iter().map(|r| &r.profile.vector).collect();
            let mut prev = f64::INFINITY;
            for round in 0..=g.trees.len() {
                let mse = xs
                    .iter()
                    .zip(&rows)
                    .map(|(x, r)| (g.predict_staged(x, round) - r.target).powi(2))
                    .sum::<f64>()
                    / rows.len() as f64;
                assert_eq!(mse, g.train_mse[round]);
                assert!(mse <= prev, "round {round}: {mse} > {prev}");
                prev = mse;
            }
        }
    }

    #[test]
    fn forest_is_mean_of_trees() {
        let rows = random_rows(60, 4, 12);
        let m = train(&ModelSpec::random_forest(5, 15, 0.8), &rows, 1).unwrap();
        let ModelParams::RandomForest(f) = &m.params else { unreachable!() };
        for r in random_rows(10, 4, 13) {
            let per_tree = f.tree_predictions(&r.profile.vector);
            let mean = per_tree.iter().sum::<f64>() / per_tree.len() as f64;
            assert_eq!(m.predict_raw(&r.profile).unwrap(), mean);
        }
    }

    #[test]
    fn single_row_models_predict_its_target() {
        let rows = vec![TrainingRow { profile: profile(vec![0.3, 1.2, -0.5], "a"), target: 0.4 }];
        for spec in small_specs() {
            let m = train(&spec, &rows, 0).unwrap();
            let p = predict(&m, &rows[0].profile).unwrap();
            assert!((p - 0.4).abs() < 1e-9, "{}: {p}", spec.kind);
        }
    }

    #[test]
    fn outputs_are_clipped() {
        let rows: Vec<TrainingRow> = (0..20)
            .map(|i| TrainingRow {
                profile: profile(vec![i as f64], "a"),
                target: if i < 10 { 0.0 } else { 1.0 },
            })
            .collect();
        for spec in small_specs() {
            let m = train(&spec, &rows, 0).unwrap();
            for x in [-1e6, -3.0, 0.5, 40.0, 1e6] {
                let p = predict(&m, &profile(vec![x], "a")).unwrap();
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let rows = random_rows(40, 5, 21);
        for spec in small_specs() {
            let a = model_to_string(&train(&spec, &rows, 8).unwrap());
            let b = model_to_string(&train(&spec, &rows, 8).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rows = random_rows(10, 3, 1);
        rows[4].profile.dims = 2;
        rows[4].profile.vector.pop();
        assert!(matches!(train(&ModelSpec::knn(1), &rows, 0), Err(Error::Shape(_))));

        let rows = random_rows(10, 3, 1);
        let m = train(&ModelSpec::knn(1), &rows, 0).unwrap();
        assert!(matches!(predict(&m, &profile(vec![1.0, 2.0], "a")), Err(Error::Shape(_))));
        assert!(train(&ModelSpec::knn(1), &[], 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::knn(0).validate().is_err());
        assert!(ModelSpec::random_forest(10, 260, 0.8).validate().is_ok());
        assert!(ModelSpec::random_forest(10, 260, 1.5).validate().is_err());
        assert!(ModelSpec::new(ModelKind::Gbt, &[("max_depth", 3.0)]).validate().is_err());
        for kind in ModelKind::ALL {
            ModelSpec::default_for(kind).validate().unwrap();
            assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let net = Mlp::random(4, 5, 1.0, &mut rng);
        let (_, grad) = net.loss_and_gradient(&xs, &ys);
        let h = 1e-5;
        for (i, g) in grad.iter().enumerate() {
            let mut up = net.clone();
            up.params[i] += h;
            let mut down = net.clone();
            down.params[i] -= h;
            let fd = (up.loss(&xs, &ys) - down.loss(&xs, &ys)) / (2.0 * h);
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!((fd - g).abs() / denom < 1e-4, "param {i}: {fd} vs {}", g);
        }
    }

    #[test]
    fn knn_order_survives_affine_rescaling() {
        let rows = random_rows(30, 4, 17);
        let scaled: Vec<TrainingRow> = rows
            .iter()
            .map(|r| TrainingRow {
                profile: profile(r.profile.vector.iter().map(|v| 3.5 * v - 2.0).collect(), &r.profile.task_id),
                target: r.target,
            })
            .collect();
        let a = train(&ModelSpec::knn(5), &rows, 0).unwrap();
        let b = train(&ModelSpec::knn(5), &scaled, 0).unwrap();
        let (ModelParams::Knn(ka), ModelParams::Knn(kb)) = (&a.params, &b.params) else { unreachable!() };
        for q in random_rows(10, 4, 18) {
            let qa = a.standardization.apply(&q.profile.vector);
            let qs: Vec<f64> = q.profile.vector.iter().map(|v| 3.5 * v - 2.0).collect();
            let qb = b.standardization.apply(&qs);
            assert_eq!(ka.neighbours(&qa)[..5], kb.neighbours(&qb)[..5]);
        }
    }
}
