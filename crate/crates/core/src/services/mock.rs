//! Deterministic synthetic marketplace.
//!
//! Latent structure: service skill `s_i`, task difficulty `d_j`, context
//! helpfulness `h_jk` and service/task familiarity `phi_ij`. A sample is
//! answered correctly with probability
//!
//! ```text
//! q = clamp(s_i - d_j + h_jk + lambda * (phi_ij - 0.5), 0, 1)
//! ```
//!
//! and otherwise gets a partially overlapping answer. Token sharpness tracks
//! the sample's F1 at strength `feature_fidelity`, shifted by familiarity
//! (overconfidence `beta`) and jittered per sample by `u ~ U(-eta, eta)`:
//!
//! ```text
//! sharpness = fidelity * (f1 + beta * (phi - 0.5) + u) + (1 - fidelity) * v
//! ```
//!
//! Input-token scores rise with familiarity, so PPL disambiguates the
//! familiarity shift that output-side features alone cannot. Every
//! invocation draws from a stream keyed by `(seed, service, task, context, sample)`; the fine-tuned variant reuses
//! the same streams with skill `s' = s (1 + kappa)`.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{Capabilities, LlmService, ServiceDescriptor, ServiceKind};
use crate::error::{Error, Result};
use crate::evaluation::{f1_score, task_performance, RecordSource};
use crate::records::{ContextSpec, InvocationRecord, RecordStore, SettingKey, Split, TaskDataset, TaskSample, TokenStep};
use crate::seed::SeedHasher;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketplaceConfig {
    pub n_services: usize,
    pub n_tasks: usize,
    pub samples_per_task: usize,
    pub contexts_per_task: usize,
    pub skill_range: (f64, f64),
    pub difficulty_range: (f64, f64),
    /// Additive context effect; may be negative.
    pub helpfulness_range: (f64, f64),
    /// How strongly token-probability sharpness tracks correctness.
    pub feature_fidelity: f64,
    /// Effect of familiarity on the correctness probability.
    pub familiarity_weight: f64,
    /// Confidence shift per unit of familiarity, applied to every answer.
    pub overconfidence: f64,
    /// Half-width of the uniform per-sample noise on sharpness.
    pub sharpness_noise: f64,
    /// Strength with which familiarity lifts input-token scores.
    pub input_bias: f64,
    pub familiarity_range: (f64, f64),
    /// Relative skill gain of the simulated fine-tuned variant.
    pub finetune_gain: f64,
    pub top_k: usize,
    pub input_scoring: bool,
    pub demos_per_context: usize,
    pub seed: u64,
}

impl Default for MarketplaceConfig {
    fn default() -> Self {
        MarketplaceConfig {
            n_services: 5,
            n_tasks: 13,
            samples_per_task: 500,
            contexts_per_task: 10,
            skill_range: (0.2, 0.8),
            difficulty_range: (0.1, 0.5),
            helpfulness_range: (-0.1, 0.1),
            feature_fidelity: 0.9,
            familiarity_weight: 0.2,
            overconfidence: 1.0,
            sharpness_noise: 0.4,
            input_bias: 0.6,
            familiarity_range: (0.0, 1.0),
            finetune_gain: 0.25,
            top_k: 5,
            input_scoring: true,
            demos_per_context: 4,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64) -> Result<()> {
    if !(lo >= min && hi <= 1.0 && lo <= hi) {
        return Err(Error::invalid(
            name,
            format!("({lo}, {hi}) must satisfy {min} <= lo <= hi <= 1"),
        ));
    }
    Ok(())
}

impl MarketplaceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_services", self.n_services),
            ("n_tasks", self.n_tasks),
            ("samples_per_task", self.samples_per_task),
            ("contexts_per_task", self.contexts_per_task),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        check_range("skill_range", self.skill_range, 0.0)?;
        check_range("difficulty_range", self.difficulty_range, 0.0)?;
        check_range("helpfulness_range", self.helpfulness_range, -1.0)?;
        check_range("familiarity_range", self.familiarity_range, 0.0)?;
        for (name, v) in [
            ("feature_fidelity", self.feature_fidelity),
            ("familiarity_weight", self.familiarity_weight),
            ("overconfidence", self.overconfidence),
            ("input_bias", self.input_bias),
            ("sharpness_noise", self.sharpness_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} is outside [0, 1]")));
            }
        }
        if !(self.finetune_gain > 0.0 && self.finetune_gain.is_finite()) {
            return Err(Error::invalid("finetune_gain", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("marketplace config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("marketplace configs always serialize")
    }
}

#[derive(Clone, Debug)]
struct ServiceLatent {
    id: String,
    skill: f64,
}

#[derive(Clone, Debug)]
struct TaskLatent {
    id: String,
    difficulty: f64,
    samples: Vec<TaskSample>,
    contexts: Vec<ContextSpec>,
    helpfulness: Vec<f64>,
    /// Per service.
    familiarity: Vec<f64>,
    /// Per service; offsets the input-token scores.
    input_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MockMarketplace {
    pub config: MarketplaceConfig,
    services: Vec<ServiceLatent>,
    tasks: Vec<TaskLatent>,
}

const REFERENCE_WORDS: usize = 400;

fn sample_text(hasher: SeedHasher, task: usize) -> (String, String) {
    let mut rng = hasher.rng();
    let n_in = rng.random_range(6..=14);
    let input: Vec<String> = (0..n_in)
        .map(|_| format!("q{}", rng.random_range(0..REFERENCE_WORDS)))
        .collect();
    let n_ref = rng.random_range(1..=5);
    let reference: Vec<String> = (0..n_ref)
        .map(|_| format!("t{task}w{}", rng.random_range(0..REFERENCE_WORDS)))
        .collect();
    (input.join(" "), reference.join(" "))
}

impl MockMarketplace {
    pub fn new(config: MarketplaceConfig) -> Result<Self> {
        config.validate()?;
        let root = SeedHasher::new(config.seed);
        let n = config.n_services;

        // Stratified skills: one draw per equal-width band, bands shuffled.
        let mut rng = root.clone().str("skill").rng();
        let mut bands: Vec<usize> = (0..n).collect();
        bands.shuffle(&mut rng);
        let (lo, hi) = config.skill_range;
        let services = bands
            .iter()
            .enumerate()
            .map(|(i, &b)| ServiceLatent {
                id: format!("svc{i:02}"),
                skill: lo + (hi - lo) * (b as f64 + rng.random::<f64>()) / n as f64,
            })
            .collect();

        let tasks = (0..config.n_tasks)
            .map(|j| {
                let mut rng = root.clone().str("task").num(j as u64).rng();
                let (dlo, dhi) = config.difficulty_range;
                let difficulty = rng.random_range(dlo..=dhi);
                let (hlo, hhi) = config.helpfulness_range;
                let helpfulness = (0..config.contexts_per_task)
                    .map(|_| rng.random_range(hlo..=hhi))
                    .collect();
                let (flo, fhi) = config.familiarity_range;
                let familiarity = (0..n).map(|_| rng.random_range(flo..=fhi)).collect();
                let input_bias = (0..n).map(|_| rng.random::<f64>()).collect();
                let samples = (0..config.samples_per_task)
                    .map(|m| {
                        let (input_text, reference) =
                            sample_text(root.clone().str("sample").num(j as u64).num(m as u64), j);
                        TaskSample {
                            sample_id: format!("s{m:04}"),
                            input_text,
                            reference: Some(reference),
                        }
                    })
                    .collect();
                let contexts = (0..config.contexts_per_task)
                    .map(|k| {
                        let examples = (0..config.demos_per_context)
                            .map(|e| {
                                sample_text(
                                    root.clone().str("demo").num(j as u64).num(k as u64).num(e as u64),
                                    j,
                                )
                            })
                            .collect();
                        ContextSpec::new(format!("ctx{k:02}"), examples)
                    })
                    .collect();
                TaskLatent {
                    id: format!("task{j:02}"),
                    difficulty,
                    samples,
                    contexts,
                    helpfulness,
                    familiarity,
                    input_bias,
                }
            })
            .collect();
        Ok(MockMarketplace {
            config,
            services,
            tasks,
        })
    }

    /// The same marketplace with every service replaced by its simulated
    /// fine-tuned variant. Invocations share random streams with the
    /// original, so differences come from the skill change alone.
    pub fn finetuned(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.services {
            s.skill *= 1.0 + self.config.finetune_gain;
        }
        out
    }

    pub fn service_ids(&self) -> Vec<String> {
        self.services.iter().map(|s| s.id.clone()).collect()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn settings(&self) -> Vec<SettingKey> {
        let mut keys = Vec::new();
        for s in &self.services {
            for t in &self.tasks {
                for c in &t.contexts {
                    keys.push(SettingKey::new(s.id.as_str(), t.id.as_str(), c.context_id.as_str()));
                }
            }
        }
        keys
    }

    fn service_index(&self, id: &str) -> Result<usize> {
        self.services
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Lookup(format!("no mock service `{id}`")))
    }

    fn task(&self, id: &str) -> Result<&TaskLatent> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Lookup(format!("no mock task `{id}`")))
    }

    pub fn skill(&self, service_id: &str) -> Result<f64> {
        Ok(self.services[self.service_index(service_id)?].skill)
    }

    pub fn finetuned_skill(&self, service_id: &str) -> Result<f64> {
        Ok(self.skill(service_id)? * (1.0 + self.config.finetune_gain))
    }

    pub fn contexts(&self, task_id: &str) -> Result<&[ContextSpec]> {
        Ok(&self.task(task_id)?.contexts)
    }

    pub fn descriptor(&self, service_id: &str) -> Result<ServiceDescriptor> {
        self.service_index(service_id)?;
        Ok(ServiceDescriptor {
            service_id: service_id.into(),
            kind: ServiceKind::Mock,
            capabilities: Capabilities {
                generation: true,
                input_scoring: self.config.input_scoring,
                top_k: self.config.top_k,
            },
            endpoint: None,
        })
    }

    pub fn descriptors(&self) -> Vec<ServiceDescriptor> {
        self.services
            .iter()
            .map(|s| self.descriptor(&s.id).expect("own service"))
            .collect()
    }

    pub fn datasets(&self) -> Vec<TaskDataset> {
        self.tasks
            .iter()
            .map(|t| TaskDataset {
                task_id: t.id.clone(),
                split: Split::Test,
                samples: t.samples.clone(),
            })
            .collect()
    }

    /// Latent correctness probability `q` of a setting.
    pub fn correctness_probability(&self, key: &SettingKey) -> Result<f64> {
        let i = self.service_index(&key.service_id)?;
        let task = self.task(&key.task_id)?;
        let h = self.helpfulness(task, &key.context_id);
        Ok(self.q(i, task, h))
    }

    fn helpfulness(&self, task: &TaskLatent, context_id: &str) -> f64 {
        task.contexts
            .iter()
            .position(|c| c.context_id == context_id)
            .map_or(0.0, |k| task.helpfulness[k])
    }

    fn q(&self, i: usize, task: &TaskLatent, helpfulness: f64) -> f64 {
        let phi = task.familiarity[i];
        (self.services[i].skill - task.difficulty + helpfulness
            + self.config.familiarity_weight * (phi - 0.5))
            .clamp(0.0, 1.0)
    }

    /// Invokes a service on one of the marketplace's own samples.
    pub fn invoke(&self, key: &SettingKey, sample_id: &str) -> Result<InvocationRecord> {
        let i = self.service_index(&key.service_id)?;
        let task = self.task(&key.task_id)?;
        let sample = task
            .samples
            .iter()
            .find(|s| s.sample_id == sample_id)
            .ok_or_else(|| Error::Lookup(format!("task `{}` has no sample `{sample_id}`", key.task_id)))?;
        let h = self.helpfulness(task, &key.context_id);
        Ok(self.generate(
            i,
            task,
            h,
            &key.context_id,
            sample_id,
            &sample.input_text,
            sample.reference.as_deref().expect("mock samples carry references"),
            true,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        i: usize,
        task: &TaskLatent,
        helpfulness: f64,
        context_id: &str,
        sample_id: &str,
        input_text: &str,
        reference: &str,
        keep_reference: bool,
    ) -> InvocationRecord {
        let cfg = &self.config;
        let service = &self.services[i];
        let mut rng = SeedHasher::new(cfg.seed)
            .str("invoke")
            .str(&service.id)
            .str(&task.id)
            .str(context_id)
            .str(sample_id)
            .rng();
        let q = self.q(i, task, helpfulness);
        let phi = task.familiarity[i];
        let fidelity = cfg.feature_fidelity;

        let u: f64 = rng.random();
        let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
        let mut tokens: Vec<String> = Vec::with_capacity(ref_tokens.len() + 1);
        let mut keep = Vec::with_capacity(ref_tokens.len());
        for _ in &ref_tokens {
            keep.push(rng.random::<f64>() < 0.35);
        }
        let wrong: Vec<String> = (0..ref_tokens.len())
            .map(|_| format!("x{}", rng.random_range(0..REFERENCE_WORDS)))
            .collect();
        if u < q {
            tokens.extend(ref_tokens.iter().map(|t| t.to_string()));
        } else {
            if keep.iter().all(|k| *k) {
                keep[0] = false;
            }
            for ((t, k), w) in ref_tokens.iter().zip(&keep).zip(&wrong) {
                tokens.push(if *k { t.to_string() } else { w.clone() });
            }
        }
        let generated_text = tokens.join(" ");
        let f1 = f1_score(&generated_text, reference);

        let v: f64 = rng.random();
        let jitter = cfg.sharpness_noise * rng.random_range(-1.0..=1.0);
        let sharp = fidelity * (f1 + cfg.overconfidence * (phi - 0.5) + jitter) + (1.0 - fidelity) * v;
        let sharp = sharp.clamp(0.0, 1.0);
        let beta = Beta::new(2.0, 2.0).expect("valid shape");
        let output_steps = tokens
            .iter()
            .map(|tok| {
                let top1 = 0.4 + 0.5 * sharp + 0.1 * beta.sample(&mut rng);
                let rest = 1.0 - top1;
                let mut weights: Vec<f64> = (1..cfg.top_k).map(|_| rng.random_range(0.1..1.0)).collect();
                weights.sort_by(|a, b| b.total_cmp(a));
                let total: f64 = weights.iter().sum();
                let mut probs = Vec::with_capacity(cfg.top_k);
                probs.push((tok.clone(), top1));
                for (a, w) in weights.iter().enumerate() {
                    let p = (0.9 * rest * w / total).min(top1);
                    probs.push((format!("{tok}~{a}"), p));
                }
                TokenStep::new(tok.clone(), probs)
            })
            .collect();

        let input_scores = cfg.input_scoring.then(|| {
            let bias = task.input_bias[i];
            let mu = 0.5 + fidelity * cfg.input_bias * (phi - 0.5) + (1.0 - fidelity) * 0.3 * (bias - 0.5);
            input_text
                .split_whitespace()
                .map(|_| (mu + rng.random_range(-0.15..0.15)).clamp(0.01, 1.0))
                .collect()
        });

        InvocationRecord {
            service_id: service.id.clone(),
            task_id: task.id.clone(),
            context_id: context_id.into(),
            sample_id: sample_id.into(),
            input_text: input_text.into(),
            generated_text,
            output_steps,
            input_scores,
            reference: keep_reference.then(|| reference.to_string()),
        }
    }

    /// Every sample of the task under one setting, in sample order.
    pub fn generate_setting(&self, key: &SettingKey) -> Result<Vec<InvocationRecord>> {
        let i = self.service_index(&key.service_id)?;
        let task = self.task(&key.task_id)?;
        if !task.contexts.iter().any(|c| c.context_id == key.context_id) {
            return Err(Error::Lookup(format!("task `{}` has no context `{}`", task.id, key.context_id)));
        }
        let h = self.helpfulness(task, &key.context_id);
        Ok(task
            .samples
            .iter()
            .map(|s| {
                self.generate(
                    i,
                    task,
                    h,
                    &key.context_id,
                    &s.sample_id,
                    &s.input_text,
                    s.reference.as_deref().expect("mock samples carry references"),
                    true,
                )
            })
            .collect())
    }

    /// Ground truth of one setting.
    pub fn true_performance(&self, key: &SettingKey) -> Result<f64> {
        task_performance(&self.generate_setting(key)?)
    }

    pub fn record_store(&self) -> RecordStore {
        let mut store = RecordStore::new();
        for key in self.settings() {
            for r in self.generate_setting(&key).expect("own setting") {
                store.push(r);
            }
        }
        store
    }

    pub fn service(&self, service_id: &str) -> Result<MockService<'_>> {
        Ok(MockService {
            market: self,
            index: self.service_index(service_id)?,
            descriptor: self.descriptor(service_id)?,
        })
    }
}

impl RecordSource for MockMarketplace {
    fn context_ids(&self, task_id: &str) -> Vec<String> {
        self.task(task_id)
            .map(|t| t.contexts.iter().map(|c| c.context_id.clone()).collect())
            .unwrap_or_default()
    }

    fn setting_records(&self, key: &SettingKey) -> Result<Option<Cow<'_, [InvocationRecord]>>> {
        match self.generate_setting(key) {
            Ok(r) => Ok(Some(Cow::Owned(r))),
            Err(Error::Lookup(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// One marketplace service behind the generic service interface.
pub struct MockService<'a> {
    market: &'a MockMarketplace,
    index: usize,
    descriptor: ServiceDescriptor,
}

impl LlmService for MockService<'_> {
    fn descriptor(&self) -> &ServiceDescriptor {
        &self.descriptor
    }

    /// Known samples reproduce the marketplace records exactly. Anything
    /// else is answered against a pseudo-reference derived from the input,
    /// which is not attached to the record.
    fn invoke(&self, task_id: &str, sample_id: &str, input_text: &str, context: &ContextSpec) -> Result<InvocationRecord> {
        let m = self.market;
        let neutral;
        let task = match m.task(task_id) {
            Ok(t) => t,
            Err(_) => {
                neutral = TaskLatent {
                    id: task_id.into(),
                    difficulty: 0.5 * (m.config.difficulty_range.0 + m.config.difficulty_range.1),
                    samples: Vec::new(),
                    contexts: Vec::new(),
                    helpfulness: Vec::new(),
                    familiarity: vec![0.5; m.services.len()],
                    input_bias: vec![0.5; m.services.len()],
                };
                &neutral
            }
        };
        let h = m.helpfulness(task, &context.context_id);
        let known = task
            .samples
            .iter()
            .find(|s| s.sample_id == sample_id && s.input_text == input_text);
        Ok(match known {
            Some(s) => m.generate(
                self.index,
                task,
                h,
                &context.context_id,
                sample_id,
                input_text,
                s.reference.as_deref().expect("mock samples carry references"),
                true,
            ),
            None => {
                let (_, pseudo) = sample_text(SeedHasher::new(m.config.seed).str("pseudo").str(input_text), 0);
                m.generate(self.index, task, h, &context.context_id, sample_id, input_text, &pseudo, false)
            }
        })
    }
}

/// Services, task datasets and the full record store of a marketplace.
pub fn synth_marketplace(config: MarketplaceConfig) -> Result<(Vec<ServiceDescriptor>, Vec<TaskDataset>, RecordStore)> {
    let market = MockMarketplace::new(config)?;
    Ok((market.descriptors(), market.datasets(), market.record_store()))
}
