//! Append-only persistence of invocations so that no paid call is repeated.
//!
//! Records go to a JSONL record file; a sidecar `<file>.keys` lists the
//! hash key of every completed invocation, one per line. A record is
//! appended only after it validates, and its key right after.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::LlmService;
use crate::error::{Error, Result};
use crate::records::{append_records, ContextSpec, TaskDataset};
use crate::seed::SeedHasher;

/// Stable key of one invocation under a parameter string.
pub fn invocation_key(service_id: &str, task_id: &str, context_id: &str, sample_id: &str, params: &str) -> String {
    let h = SeedHasher::new(0)
        .str(service_id)
        .str(task_id)
        .str(context_id)
        .str(sample_id)
        .str(params)
        .finish();
    format!("{h:016x}")
}

pub struct InvocationCache {
    records: PathBuf,
    keys_path: PathBuf,
    keys: Mutex<HashSet<String>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InvokeSummary {
    pub invoked: usize,
    pub cached: usize,
}

impl InvocationCache {
    pub fn open(records: impl AsRef<Path>) -> Result<Self> {
        let records = records.as_ref().to_path_buf();
        let mut keys_path = records.clone().into_os_string();
        keys_path.push(".keys");
        let keys_path = PathBuf::from(keys_path);
        let keys = match std::fs::read_to_string(&keys_path) {
            Ok(text) => text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashSet::new(),
            Err(e) => return Err(Error::io(&keys_path, e)),
        };
        Ok(InvocationCache {
            records,
            keys_path,
            keys: Mutex::new(keys),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.lock().expect("cache lock").contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Invokes `service` on every sample of `task` under `context` that is
    /// not cached yet, at most `concurrency` calls in flight. Stops at the
    /// first error; everything completed before it stays persisted.
    pub fn invoke_task(
        &self,
        service: &dyn LlmService,
        task: &TaskDataset,
        context: &ContextSpec,
        params: &str,
        concurrency: usize,
    ) -> Result<InvokeSummary> {
        let service_id = &service.descriptor().service_id;
        let pending: Vec<_> = task
            .samples
            .iter()
            .map(|s| (s, invocation_key(service_id, &task.task_id, &context.context_id, &s.sample_id, params)))
            .filter(|(_, k)| !self.contains(k))
            .collect();
        let cached = task.samples.len() - pending.len();
        let writer = Mutex::new(());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            pending.par_iter().try_for_each(|(sample, key)| {
                let mut record = service.invoke(&task.task_id, &sample.sample_id, &sample.input_text, context)?;
                if record.reference.is_none() {
                    record.reference = sample.reference.clone();
                }
                let _guard = writer.lock().expect("writer lock");
                append_records(std::slice::from_ref(&record), &self.records)?;
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&self.keys_path)
                    .map_err(|e| Error::io(&self.keys_path, e))?;
                writeln!(f, "{key}").map_err(|e| Error::io(&self.keys_path, e))?;
                self.keys.lock().expect("cache lock").insert(key.clone());
                Ok(())
            })
        })?;
        Ok(InvokeSummary {
            invoked: pending.len(),
            cached,
        })
    }
}
