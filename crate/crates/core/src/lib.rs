//! Label-free performance estimation for black-box LLM services.
//!
//! Token-probability features (NLL, PPL, GAP, MaxEnt) are extracted from
//! invocation records, summarized into fixed-dimension profiles, and fed to
//! small meta-model regressors that predict task-level F1 without labels.
//! A deterministic synthetic marketplace stands in for real services in
//! tests and experiments; an OpenAI-compatible client talks to real ones.

pub mod applications;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod metamodels;
pub mod profile;
pub mod records;
pub mod seed;
pub mod selection;
pub mod services;

pub use error::{Error, Result};
pub use features::{FeatureKind, PplMode};
pub use metamodels::{ModelKind, ModelSpec, TrainedMetaModel, TrainingRow};
pub use profile::FeatureProfile;
pub use records::{ContextSpec, InvocationRecord, RecordStore, SettingKey, TaskDataset, TokenStep};
