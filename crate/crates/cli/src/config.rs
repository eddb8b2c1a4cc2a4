//! Run configuration file: paths, plan settings and marketplace settings.
//!
//! ```toml
//! seed = 7
//! jobs = 2
//!
//! [paths]
//! store = "store/records.jsonl"
//! model = "model.json"
//! report = "report.json"
//!
//! [plan]
//! d = 50
//! feature_kinds = ["NLL", "PPL"]
//! model_specs = [{ kind = "KNN", hyperparams = { k = 3 } }]
//!
//! [marketplace]
//! n_services = 3
//! ```
//!
//! Relative paths resolve against the file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Deserialize;

use plugperf::evaluation::ExperimentPlan;
use plugperf::features::{FeatureKind, PplMode};
use plugperf::metamodels::ModelSpec;
use plugperf::services::MarketplaceConfig;
use plugperf::RecordStore;

use crate::PlanArgs;

/// Bad or missing command-line input, reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub store: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub services: Option<PathBuf>,
    pub marketplace: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub services: Option<Vec<String>>,
    pub tasks: Option<Vec<String>>,
    pub contexts_per_task: Option<usize>,
    pub unlabeled_n: Option<usize>,
    pub d: Option<usize>,
    pub feature_kinds: Option<Vec<FeatureKind>>,
    pub model_specs: Option<Vec<ModelSpec>>,
    pub folds: Option<usize>,
    pub sample_n: Option<Vec<usize>>,
    pub grouped: Option<bool>,
    pub per_service: Option<bool>,
    pub ppl_mode: Option<PplMode>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "seed")]
    pub explicit_seed: Option<u64>,
    pub jobs: Option<usize>,
    pub paths: Paths,
    pub plan: PlanConfig,
    pub marketplace: Option<MarketplaceConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.store,
            &mut p.tasks,
            &mut p.contexts,
            &mut p.services,
            &mut p.marketplace,
            &mut p.model,
            &mut p.report,
        ] {
            if let Some(rel) = slot.as_mut() {
                if rel.is_relative() {
                    *rel = base.join(&*rel);
                }
            }
        }
        Ok(cfg)
    }

    /// The flag value, else the configured path, else a usage error.
    pub fn path(&self, flag: Option<PathBuf>, field: impl Fn(&Paths) -> &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        flag.or_else(|| field(&self.paths).clone())
            .ok_or_else(|| Usage(format!("{name} is required (flag or [paths] entry)")).into())
    }

    /// Plan over the store's services and tasks, with file values
    /// overridden by flags. Without an explicit count, every task uses as
    /// many contexts as the sparsest task has.
    pub fn plan(&self, store: &RecordStore, args: &PlanArgs, seed: u64) -> Result<ExperimentPlan> {
        let c = &self.plan;
        let services = c.services.clone().unwrap_or_else(|| store.service_ids());
        let tasks = c.tasks.clone().unwrap_or_else(|| store.task_ids());
        let contexts = match args.contexts_per_task.or(c.contexts_per_task) {
            Some(k) => k,
            None => tasks.iter().map(|t| store.context_ids(t).len()).min().unwrap_or(0),
        };
        let mut plan = ExperimentPlan::new(services, tasks, contexts);
        plan.seed = seed;
        if let Some(v) = args.unlabeled_n.or(c.unlabeled_n) {
            plan.unlabeled_n = v;
        }
        if let Some(v) = args.d.or(c.d) {
            plan.d = v;
        }
        if let Some(v) = args.kinds.clone().or_else(|| c.feature_kinds.clone()) {
            plan.feature_kinds = v;
        }
        if let Some(kind) = args.model_kind {
            plan.model_specs = vec![ModelSpec::default_for(kind)];
        } else if let Some(v) = c.model_specs.clone() {
            plan.model_specs = v;
        }
        if let Some(v) = args.folds.or(c.folds) {
            plan.folds = v;
        }
        if let Some(v) = c.sample_n.clone() {
            plan.sample_n = v;
        }
        if let Some(v) = c.grouped {
            plan.grouped = v;
        }
        if let Some(v) = c.per_service {
            plan.per_service = v;
        }
        if let Some(v) = c.ppl_mode {
            plan.ppl_mode = v;
        }
        if plan.model_specs.is_empty() {
            return Err(Usage("at least one model spec is required".into()).into());
        }
        Ok(plan)
    }
}
