//! Ground-truth scoring, cross-validation and the experiment runner that
//! compares meta-models against the labeled baselines.

mod cv;
mod scoring;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cv::{kfold_split, kfold_split_grouped, Fold};
pub(crate) use scoring::mean_sd;
pub use scoring::{f1_score, mae, normalize_tokens, sample_f1, task_performance};

use crate::baselines::{atc_calibrate, avg_train_estimate, confidence, sample_n_estimate};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, PplMode};
use crate::metamodels::{predict, train, ModelSpec, TrainingRow};
use crate::profile::{build_profile_with, FeatureProfile, DEFAULT_DIMS, DEFAULT_KINDS};
use crate::records::{InvocationRecord, RecordStore, SettingKey};
use crate::seed::SeedHasher;

pub const AVG_TRAIN: &str = "AvgTrain";
pub const ATC: &str = "ATC";

/// Anything that can hand out the records of one setting. Lets large
/// synthetic runs generate settings on demand instead of holding every
/// record in memory.
pub trait RecordSource: Sync {
    /// Sorted context ids available for a task, across all services.
    fn context_ids(&self, task_id: &str) -> Vec<String>;
    /// Records of one setting, or `None` when the setting was never invoked.
    fn setting_records(&self, key: &SettingKey) -> Result<Option<Cow<'_, [InvocationRecord]>>>;
}

impl RecordSource for RecordStore {
    fn context_ids(&self, task_id: &str) -> Vec<String> {
        RecordStore::context_ids(self, task_id)
    }

    fn setting_records(&self, key: &SettingKey) -> Result<Option<Cow<'_, [InvocationRecord]>>> {
        Ok(self.get(key).map(Cow::Borrowed))
    }
}

fn default_unlabeled_n() -> usize {
    400
}
fn default_d() -> usize {
    DEFAULT_DIMS
}
fn default_kinds() -> Vec<FeatureKind> {
    DEFAULT_KINDS.to_vec()
}
fn default_specs() -> Vec<ModelSpec> {
    vec![ModelSpec::default_for(crate::metamodels::ModelKind::RandomForest)]
}
fn default_folds() -> usize {
    5
}
fn default_sample_n() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub services: Vec<String>,
    pub tasks: Vec<String>,
    /// The first `contexts_per_task` contexts (in id order) of each task.
    pub contexts_per_task: usize,
    #[serde(default = "default_unlabeled_n")]
    pub unlabeled_n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_kinds")]
    pub feature_kinds: Vec<FeatureKind>,
    #[serde(default = "default_specs")]
    pub model_specs: Vec<ModelSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Label budgets for the Sample^n baselines.
    #[serde(default = "default_sample_n")]
    pub sample_n: Vec<usize>,
    /// Keep every setting of a task in the same fold.
    #[serde(default = "default_true")]
    pub grouped: bool,
    /// One meta-model per service instead of a single global one.
    #[serde(default)]
    pub per_service: bool,
    #[serde(default)]
    pub ppl_mode: PplMode,
}

impl ExperimentPlan {
    pub fn new(services: Vec<String>, tasks: Vec<String>, contexts_per_task: usize) -> Self {
        ExperimentPlan {
            services,
            tasks,
            contexts_per_task,
            unlabeled_n: default_unlabeled_n(),
            d: default_d(),
            feature_kinds: default_kinds(),
            model_specs: default_specs(),
            folds: default_folds(),
            seed: 0,
            sample_n: default_sample_n(),
            grouped: true,
            per_service: false,
            ppl_mode: PplMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("services", self.services.len()),
            ("tasks", self.tasks.len()),
            ("contexts_per_task", self.contexts_per_task),
            ("unlabeled_n", self.unlabeled_n),
            ("d", self.d),
            ("feature_kinds", self.feature_kinds.len()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("`folds` must be at least 2, got {}", self.folds)));
        }
        if self.sample_n.contains(&0) {
            return Err(Error::Config("Sample^n budgets must be at least 1".into()));
        }
        for spec in &self.model_specs {
            spec.validate()?;
        }
        Ok(())
    }

    /// Report names of the meta-model estimators, one per spec. The bare
    /// kind name is used unless two specs share a kind.
    pub fn model_names(&self) -> Vec<String> {
        self.model_specs
            .iter()
            .map(|s| {
                let shared = self.model_specs.iter().filter(|o| o.kind == s.kind).count() > 1;
                if shared {
                    s.label()
                } else {
                    s.kind.to_string()
                }
            })
            .collect()
    }

    /// Every estimator name in report order.
    pub fn estimator_names(&self) -> Vec<String> {
        let mut names = self.model_names();
        names.push(AVG_TRAIN.into());
        names.push(ATC.into());
        names.extend(self.sample_n.iter().map(|n| format!("Sample^{n}")));
        names
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub service_id: String,
    pub task_id: String,
    pub context_id: String,
    pub estimator: String,
    pub estimate: f64,
    pub true_performance: f64,
    pub absolute_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mae: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub estimators: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// estimator -> service -> aggregate
    pub per_service: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

impl ExperimentReport {
    fn from_rows(estimators: Vec<String>, mut rows: Vec<ReportRow>) -> Result<Self> {
        let order: BTreeMap<&str, usize> =
            estimators.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        rows.sort_by(|a, b| {
            (&a.service_id, &a.task_id, &a.context_id, order[a.estimator.as_str()])
                .cmp(&(&b.service_id, &b.task_id, &b.context_id, order[b.estimator.as_str()]))
        });
        let mut all: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut by_service: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for r in &rows {
            all.entry(r.estimator.clone()).or_default().push(r.absolute_error);
            by_service
                .entry(r.estimator.clone())
                .or_default()
                .entry(r.service_id.clone())
                .or_default()
                .push(r.absolute_error);
        }
        let agg = |errs: &Vec<f64>| {
            let (mae, sd) = mean_sd(errs);
            Aggregate { mae, sd, n: errs.len() }
        };
        Ok(ExperimentReport {
            aggregates: all.iter().map(|(k, v)| (k.clone(), agg(v))).collect(),
            per_service: by_service
                .iter()
                .map(|(k, m)| (k.clone(), m.iter().map(|(s, v)| (s.clone(), agg(v))).collect()))
                .collect(),
            estimators,
            rows,
        })
    }

    pub fn mae_of(&self, estimator: &str) -> Result<f64> {
        self.aggregates
            .get(estimator)
            .map(|a| a.mae)
            .ok_or_else(|| Error::Lookup(format!("no estimator `{estimator}` in report")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("report", e.to_string()))
    }

    /// Estimators by services, cells `MAE ± SD` in F1 percentage points.
    pub fn render_table(&self) -> String {
        let services: BTreeSet<&str> = self.rows.iter().map(|r| r.service_id.as_str()).collect();
        let mut header = vec!["estimator".to_string()];
        header.extend(services.iter().map(|s| s.to_string()));
        header.push("Total".into());
        let mut lines = vec![header];
        for est in &self.estimators {
            let mut line = vec![est.clone()];
            for s in &services {
                line.push(match self.per_service.get(est).and_then(|m| m.get(*s)) {
                    Some(a) => cell(a),
                    None => "-".into(),
                });
            }
            line.push(self.aggregates.get(est).map_or("-".into(), cell));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

fn cell(a: &Aggregate) -> String {
    format!("{:.2} ± {:.2}", a.mae * 100.0, a.sd * 100.0)
}

/// Everything the runner needs from one setting, so raw records can be
/// dropped as soon as the setting is summarized.
struct SettingSummary {
    key: SettingKey,
    truth: f64,
    profile: FeatureProfile,
    /// Confidences of the unlabeled sample.
    unlabeled_confidence: Vec<f64>,
    /// ATC threshold calibrated on all of this setting's labeled records.
    threshold: f64,
    /// `(n, estimate)` per Sample^n budget.
    sample_n: Vec<(usize, f64)>,
}

fn setting_stream(plan: &ExperimentPlan, what: &str, key: &SettingKey) -> SeedHasher {
    SeedHasher::new(plan.seed)
        .str(what)
        .str(&key.service_id)
        .str(&key.task_id)
        .str(&key.context_id)
}

/// Seeded choice of the unlabeled sample, as ascending record indices.
fn unlabeled_indices(plan: &ExperimentPlan, key: &SettingKey, available: usize) -> Result<Vec<usize>> {
    if plan.unlabeled_n > available {
        return Err(Error::InsufficientData(format!(
            "{key} has {available} records but unlabeled_n is {}",
            plan.unlabeled_n
        )));
    }
    let mut rng = setting_stream(plan, "unlabeled", key).rng();
    let mut picked = rand::seq::index::sample(&mut rng, available, plan.unlabeled_n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn unlabeled_profile(plan: &ExperimentPlan, records: &[InvocationRecord], picked: &[usize]) -> Result<FeatureProfile> {
    let unlabeled: Vec<InvocationRecord> = picked.iter().map(|&i| records[i].clone()).collect();
    build_profile_with(&unlabeled, &plan.feature_kinds, plan.d, plan.ppl_mode)
}

fn summarize(plan: &ExperimentPlan, key: &SettingKey, records: &[InvocationRecord]) -> Result<SettingSummary> {
    let picked = unlabeled_indices(plan, key, records.len())?;
    let truth = task_performance(records)?;
    let f1s: Vec<f64> = records.iter().map(sample_f1).collect::<Result<_>>()?;
    let confidences: Vec<f64> = records.iter().map(confidence).collect::<Result<_>>()?;
    let profile = unlabeled_profile(plan, records, &picked)?;
    let unlabeled_confidence = picked.iter().map(|&i| confidences[i]).collect();

    let threshold = atc_calibrate(&confidences, &f1s)?.threshold;

    let max_n = plan.sample_n.iter().copied().max().unwrap_or(0);
    let mut sample_n = Vec::with_capacity(plan.sample_n.len());
    if max_n > 0 {
        if max_n > records.len() {
            return Err(Error::InsufficientLabels {
                requested: max_n,
                available: records.len(),
            });
        }
        let mut rng = setting_stream(plan, "sample-n", key).rng();
        let order = rand::seq::index::sample(&mut rng, records.len(), max_n).into_vec();
        let labeled: Vec<(&InvocationRecord, f64)> = order.iter().map(|&i| (&records[i], f1s[i])).collect();
        let ctx = BTreeSet::from([key.context_id.clone()]);
        for &n in &plan.sample_n {
            sample_n.push((n, sample_n_estimate(&labeled, n, &ctx)?));
        }
    }
    Ok(SettingSummary {
        key: key.clone(),
        truth,
        profile,
        unlabeled_confidence,
        threshold,
        sample_n,
    })
}

/// The settings a plan covers, or a coverage error naming every missing one.
pub fn plan_settings(plan: &ExperimentPlan, source: &dyn RecordSource) -> Result<Vec<SettingKey>> {
    let mut keys = Vec::new();
    let mut missing = Vec::new();
    for task in &plan.tasks {
        let contexts = source.context_ids(task);
        if contexts.len() < plan.contexts_per_task {
            missing.push(format!(
                "{task}: {} of {} contexts present",
                contexts.len(),
                plan.contexts_per_task
            ));
        }
        for service in &plan.services {
            for ctx in contexts.iter().take(plan.contexts_per_task) {
                let key = SettingKey::new(service.as_str(), task.as_str(), ctx.as_str());
                match source.setting_records(&key)? {
                    Some(r) if !r.is_empty() => keys.push(key),
                    _ => missing.push(key.to_string()),
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    keys.sort();
    Ok(keys)
}

/// Profile (from the plan's unlabeled sample) and true performance of every
/// setting the plan covers, in setting order. These are the rows the
/// experiment trains on, available for training a deployable model.
pub fn setting_rows(plan: &ExperimentPlan, source: &dyn RecordSource) -> Result<Vec<TrainingRow>> {
    plan.validate()?;
    let keys = plan_settings(plan, source)?;
    keys.par_iter()
        .map(|key| {
            let records = source
                .setting_records(key)?
                .ok_or_else(|| Error::Coverage(vec![key.to_string()]))?;
            let picked = unlabeled_indices(plan, key, records.len())?;
            Ok(TrainingRow {
                profile: unlabeled_profile(plan, &records, &picked)?,
                target: task_performance(&records)?,
            })
        })
        .collect()
}

/// Profile of one setting from a seeded unlabeled sample of its records,
/// exactly as the experiment builds it.
pub fn unlabeled_setting_profile(plan: &ExperimentPlan, records: &[InvocationRecord]) -> Result<FeatureProfile> {
    let first = records
        .first()
        .ok_or_else(|| Error::InsufficientData("no records to profile".into()))?;
    let picked = unlabeled_indices(plan, &first.setting(), records.len())?;
    unlabeled_profile(plan, records, &picked)
}

/// Cross-validated comparison of the plan's meta-models against AvgTrain,
/// ATC and Sample^n. Deterministic in `(plan, source)`.
pub fn run_experiment(plan: &ExperimentPlan, source: &dyn RecordSource) -> Result<ExperimentReport> {
    plan.validate()?;
    let keys = plan_settings(plan, source)?;
    let summaries: Vec<SettingSummary> = keys
        .par_iter()
        .map(|key| {
            let records = source
                .setting_records(key)?
                .ok_or_else(|| Error::Coverage(vec![key.to_string()]))?;
            summarize(plan, key, &records)
        })
        .collect::<Result<_>>()?;

    let split_seed = SeedHasher::new(plan.seed).str("folds").finish();
    let tasks: Vec<&str> = keys.iter().map(|k| k.task_id.as_str()).collect();
    let distinct_tasks: BTreeSet<&str> = tasks.iter().copied().collect();
    let folds = if plan.grouped && distinct_tasks.len() >= plan.folds {
        kfold_split_grouped(&tasks, plan.folds, split_seed)?
    } else {
        kfold_split(keys.len(), plan.folds, split_seed)?
    };

    let model_names = plan.model_names();
    let mut rows = Vec::new();
    for (f, (train_idx, test_idx)) in folds.iter().enumerate() {
        let train_rows: Vec<TrainingRow> = train_idx
            .iter()
            .map(|&i| TrainingRow {
                profile: summaries[i].profile.clone(),
                target: summaries[i].truth,
            })
            .collect();

        let estimates = model_estimates(plan, f, &train_rows, test_idx, &summaries)?;
        for (&i, per_model) in test_idx.iter().zip(estimates) {
            let s = &summaries[i];
            for (name, est) in model_names.iter().zip(per_model) {
                rows.push(row(s, name, est));
            }

            // Same-service training settings; every service if it has none.
            let mut sources: Vec<&SettingSummary> = train_idx
                .iter()
                .map(|&j| &summaries[j])
                .filter(|o| o.key.service_id == s.key.service_id)
                .collect();
            if sources.is_empty() {
                sources = train_idx.iter().map(|&j| &summaries[j]).collect();
            }
            let truths: Vec<f64> = sources.iter().map(|o| o.truth).collect();
            rows.push(row(s, AVG_TRAIN, avg_train_estimate(&truths)?));
            let calibrations: Vec<_> = sources
                .iter()
                .map(|o| crate::baselines::AtcCalibration {
                    source_task_id: o.key.task_id.clone(),
                    context_id: o.key.context_id.clone(),
                    threshold: o.threshold,
                    source_accuracy: o.truth,
                })
                .collect();
            rows.push(row(
                s,
                ATC,
                crate::baselines::atc_estimate(&calibrations, &s.unlabeled_confidence)?,
            ));
            for (n, est) in &s.sample_n {
                rows.push(row(s, &format!("Sample^{n}"), *est));
            }
        }
    }
    ExperimentReport::from_rows(plan.estimator_names(), rows)
}

/// Meta-model estimates for each test setting, one per spec.
fn model_estimates(
    plan: &ExperimentPlan,
    fold: usize,
    train_rows: &[TrainingRow],
    test_idx: &[usize],
    summaries: &[SettingSummary],
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(plan.model_specs.len()); test_idx.len()];
    for spec in &plan.model_specs {
        let fit_seed = |scope: &str| {
            SeedHasher::new(plan.seed)
                .str("fit")
                .num(fold as u64)
                .str(&spec.label())
                .str(scope)
                .finish()
        };
        let global = train(spec, train_rows, fit_seed(""))?;
        let mut per_service = BTreeMap::new();
        if plan.per_service {
            for s in &plan.services {
                let rows: Vec<TrainingRow> = train_rows
                    .iter()
                    .filter(|r| &r.profile.service_id == s)
                    .cloned()
                    .collect();
                if !rows.is_empty() {
                    per_service.insert(s.clone(), train(spec, &rows, fit_seed(s))?);
                }
            }
        }
        for (slot, &i) in out.iter_mut().zip(test_idx) {
            let p = &summaries[i].profile;
            let model = per_service.get(&p.service_id).unwrap_or(&global);
            slot.push(predict(model, p)?);
        }
    }
    Ok(out)
}

fn row(s: &SettingSummary, estimator: &str, estimate: f64) -> ReportRow {
    ReportRow {
        service_id: s.key.service_id.clone(),
        task_id: s.key.task_id.clone(),
        context_id: s.key.context_id.clone(),
        estimator: estimator.into(),
        estimate,
        true_performance: s.truth,
        absolute_error: (estimate - s.truth).abs(),
    }
}
