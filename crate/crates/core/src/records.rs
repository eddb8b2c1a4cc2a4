//! Invocation records, task datasets, contexts, and their JSON Lines files.
//!
//! Record file: one JSON object per line with the fields `service_id`,
//! `task_id`, `context_id`, `sample_id`, `input_text`, `generated_text`,
//! `output_steps`, `input_scores` (optional) and `reference` (optional).
//! Each output step is `{"token": ..., "top_probs": [[token, prob], ...]}`
//! with linear probabilities sorted descending. The sequence length `|x|`
//! used by the features is the number of steps the service returned.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total probability mass of one step.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub token: String,
    pub top_probs: Vec<(String, f64)>,
}

impl TokenStep {
    pub fn new(token: impl Into<String>, top_probs: Vec<(String, f64)>) -> Self {
        TokenStep {
            token: token.into(),
            top_probs,
        }
    }

    /// A step where the service was certain of its single candidate.
    pub fn certain(token: impl Into<String>) -> Self {
        let token = token.into();
        TokenStep {
            top_probs: vec![(token.clone(), 1.0)],
            token,
        }
    }

    pub fn top1(&self) -> f64 {
        self.top_probs.first().map_or(0.0, |(_, p)| *p)
    }

    /// Runner-up probability; zero when only one candidate was returned.
    pub fn top2(&self) -> f64 {
        self.top_probs.get(1).map_or(0.0, |(_, p)| *p)
    }

    pub fn depth(&self) -> usize {
        self.top_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_probs.is_empty() {
            return Err(Error::invalid("top_probs", "at least one candidate is required"));
        }
        let mut mass = 0.0;
        let mut prev = f64::INFINITY;
        for (i, (_, p)) in self.top_probs.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                return Err(Error::invalid(
                    "top_probs",
                    format!("probability {p} at rank {i} is outside [0, 1]"),
                ));
            }
            if *p > prev {
                return Err(Error::invalid(
                    "top_probs",
                    format!("not sorted non-increasing at rank {i} ({prev} < {p})"),
                ));
            }
            prev = *p;
            mass += p;
        }
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(Error::invalid(
                "top_probs",
                format!("probability mass {mass} exceeds 1"),
            ));
        }
        Ok(())
    }
}

/// Identifies one (service, task, context) invocation setting.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SettingKey {
    pub service_id: String,
    pub task_id: String,
    pub context_id: String,
}

impl SettingKey {
    pub fn new(
        service_id: impl Into<String>,
        task_id: impl Into<String>,
        context_id: impl Into<String>,
    ) -> Self {
        SettingKey {
            service_id: service_id.into(),
            task_id: task_id.into(),
            context_id: context_id.into(),
        }
    }
}

impl fmt::Display for SettingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.service_id, self.task_id, self.context_id)
    }
}

/// One sample's invocation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub service_id: String,
    pub task_id: String,
    pub context_id: String,
    pub sample_id: String,
    pub input_text: String,
    pub generated_text: String,
    pub output_steps: Vec<TokenStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl InvocationRecord {
    pub fn setting(&self) -> SettingKey {
        SettingKey::new(&self.service_id, &self.task_id, &self.context_id)
    }

    pub fn same_setting(&self, other: &InvocationRecord) -> bool {
        self.service_id == other.service_id
            && self.task_id == other.task_id
            && self.context_id == other.context_id
    }

    /// Checks every record invariant and names the first offending field.
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("service_id", &self.service_id),
            ("task_id", &self.task_id),
            ("context_id", &self.context_id),
            ("sample_id", &self.sample_id),
        ] {
            if value.is_empty() {
                return Err(Error::invalid(field, "identifier must be non-empty"));
            }
        }
        for (t, step) in self.output_steps.iter().enumerate() {
            step.validate().map_err(|e| match e {
                Error::Invalid { field, message } => Error::Invalid {
                    field,
                    message: format!("output step {t}: {message}"),
                },
                other => other,
            })?;
        }
        if let Some(scores) = &self.input_scores {
            if let Some((t, s)) = scores
                .iter()
                .enumerate()
                .find(|(_, s)| !s.is_finite() || **s <= 0.0 || **s > 1.0)
            {
                return Err(Error::invalid(
                    "input_scores",
                    format!("score {s} at position {t} is outside (0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub sample_id: String,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Samples of one task split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub samples: Vec<TaskSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskLine {
    task_id: String,
    sample_id: String,
    input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    split: Split,
}

/// In-context demonstrations prepended to every invocation of a setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub context_id: String,
    pub examples: Vec<(String, String)>,
    pub count: usize,
}

impl ContextSpec {
    pub fn new(context_id: impl Into<String>, examples: Vec<(String, String)>) -> Self {
        ContextSpec {
            context_id: context_id.into(),
            count: examples.len(),
            examples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count != self.examples.len() {
            return Err(Error::invalid(
                "count",
                format!("count {} != {} examples", self.count, self.examples.len()),
            ));
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_line<T: DeserializeOwned>(line: &str, lineno: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = path
            .split('.')
            .find(|seg| !seg.is_empty() && seg.chars().next().is_some_and(char::is_alphabetic))
            .map(|seg| seg.trim_end_matches(|c: char| c == ']' || c.is_ascii_digit() || c == '['))
            .filter(|seg| !seg.is_empty())
            .unwrap_or("record")
            .to_string();
        let message = e.into_inner().to_string();
        // serde reports missing fields at the parent path
        let field = match message.strip_prefix("missing field `") {
            Some(rest) => rest.split('`').next().unwrap_or(&field).to_string(),
            None => field,
        };
        Error::Validation {
            line: lineno,
            field,
            message,
        }
    })
}

fn lift(err: Error, lineno: usize) -> Error {
    match err {
        Error::Invalid { field, message } => Error::Validation {
            line: lineno,
            field,
            message,
        },
        other => other,
    }
}

/// Reads a record file. Line numbers in errors are 1-based.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<InvocationRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InvocationRecord = parse_line(&line, i + 1)?;
        rec.validate().map_err(|e| lift(e, i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn record_line(record: &InvocationRecord) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

pub fn write_records(records: &[InvocationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for rec in records {
        rec.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        writeln!(w, "{}", record_line(rec)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends records to a store file, creating it when absent.
pub fn append_records(records: &[InvocationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for rec in records {
        rec.validate()?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        writeln!(w, "{}", record_line(rec)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a task file into one dataset per (task, split), in first-seen order.
pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskDataset>> {
    let path = path.as_ref();
    let mut out: Vec<TaskDataset> = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TaskLine = parse_line(&line, i + 1)?;
        if row.task_id.is_empty() || row.sample_id.is_empty() {
            return Err(Error::Validation {
                line: i + 1,
                field: if row.task_id.is_empty() { "task_id" } else { "sample_id" }.into(),
                message: "identifier must be non-empty".into(),
            });
        }
        if !seen.insert((row.task_id.clone(), row.sample_id.clone())) {
            return Err(Error::Validation {
                line: i + 1,
                field: "sample_id".into(),
                message: format!("duplicate sample `{}` in task `{}`", row.sample_id, row.task_id),
            });
        }
        let sample = TaskSample {
            sample_id: row.sample_id,
            input_text: row.input_text,
            reference: row.reference,
        };
        match out
            .iter_mut()
            .find(|d| d.task_id == row.task_id && d.split == row.split)
        {
            Some(d) => d.samples.push(sample),
            None => out.push(TaskDataset {
                task_id: row.task_id,
                split: row.split,
                samples: vec![sample],
            }),
        }
    }
    Ok(out)
}

pub fn write_tasks(datasets: &[TaskDataset], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in datasets {
        for s in &d.samples {
            let line = TaskLine {
                task_id: d.task_id.clone(),
                sample_id: s.sample_id.clone(),
                input_text: s.input_text.clone(),
                reference: s.reference.clone(),
                split: d.split,
            };
            let text = serde_json::to_string(&line).expect("task lines always serialize");
            writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records indexed by setting. Iteration order is sorted by key; records
/// inside a setting keep insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordStore {
    groups: BTreeMap<SettingKey, Vec<InvocationRecord>>,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = InvocationRecord>) -> Self {
        let mut store = RecordStore::new();
        for r in records {
            store.push(r);
        }
        store
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_records(read_records(path)?))
    }

    pub fn push(&mut self, record: InvocationRecord) {
        self.groups.entry(record.setting()).or_default().push(record);
    }

    pub fn get(&self, key: &SettingKey) -> Option<&[InvocationRecord]> {
        self.groups.get(key).map(Vec::as_slice)
    }

    pub fn settings(&self) -> impl Iterator<Item = &SettingKey> {
        self.groups.keys()
    }

    pub fn groups(&self) -> impl Iterator<Item = (&SettingKey, &[InvocationRecord])> {
        self.groups.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn records(&self) -> impl Iterator<Item = &InvocationRecord> {
        self.groups.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn service_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.groups.keys().map(|k| k.service_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.groups.keys().map(|k| k.task_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn context_ids(&self, task_id: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .groups
            .keys()
            .filter(|k| k.task_id == task_id)
            .map(|k| k.context_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let all: Vec<InvocationRecord> = self.records().cloned().collect();
        write_records(&all, path)
    }
}
