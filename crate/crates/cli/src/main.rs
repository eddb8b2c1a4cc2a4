//! `plugperf` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use plugperf::applications::{rank_finetune_targets, select_setting, SettingCandidate};
use plugperf::evaluation::{run_experiment, setting_rows, task_performance, unlabeled_setting_profile, ExperimentPlan};
use plugperf::features::FeatureKind;
use plugperf::metamodels::{load_model, save_model, train, ModelKind, TrainedMetaModel};
use plugperf::profile::write_profiles;
use plugperf::records::{read_tasks, write_tasks};
use plugperf::selection::{select_features, setting_table};
use plugperf::services::{HttpService, InvocationCache, LlmService, MarketplaceConfig, MockMarketplace, ServiceConfig, ServiceKind};
use plugperf::{ContextSpec, RecordStore, SettingKey};

use config::{RunConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "plugperf", version, about = "Label-free performance estimation for LLM services")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for sampling, splits and model initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Progress messages on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic marketplace store.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Marketplace configuration (TOML); defaults otherwise.
        #[arg(long)]
        marketplace: Option<PathBuf>,
    },
    /// Invoke services on task samples, skipping cached invocations.
    Invoke {
        #[command(flatten)]
        store: StoreArg,
        /// Service configuration (TOML).
        #[arg(long)]
        services: Option<PathBuf>,
        /// Task samples (JSONL).
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Contexts per task (JSON object keyed by task id).
        #[arg(long)]
        contexts: Option<PathBuf>,
        /// Marketplace configuration backing MOCK services.
        #[arg(long)]
        marketplace: Option<PathBuf>,
        /// Only this service.
        #[arg(long)]
        service: Option<String>,
        /// Only this task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Write one feature profile per setting.
    Extract {
        #[command(flatten)]
        store: StoreArg,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank feature combinations by relevance minus redundancy.
    SelectFeatures {
        #[command(flatten)]
        store: StoreArg,
        /// Candidate features, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "NLL,PPL,GAP,MAXENT")]
        kinds: Vec<FeatureKind>,
    },
    /// Train a meta-model on every setting of the store.
    Train {
        #[command(flatten)]
        store: StoreArg,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Estimate the performance of every setting with a trained model.
    Estimate {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        unlabeled_n: Option<usize>,
    },
    /// Cross-validated comparison against the labeled baselines.
    Evaluate {
        #[command(flatten)]
        store: StoreArg,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pick the (service, context) with the best estimate for a task.
    Select {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long)]
        unlabeled_n: Option<usize>,
    },
    /// Rank services as fine-tuning targets for a task.
    RecommendFinetune {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long)]
        unlabeled_n: Option<usize>,
        /// Marketplace configuration; adds the simulated fine-tuning gain.
        #[arg(long)]
        marketplace: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct StoreArg {
    /// Record store (JSONL).
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct PlanArgs {
    #[arg(long)]
    pub unlabeled_n: Option<usize>,
    /// Profile points per feature.
    #[arg(long)]
    pub d: Option<usize>,
    /// Profile features, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<FeatureKind>>,
    /// Meta-model kind with default hyperparameters (KNN, MLP, RF, GBT).
    #[arg(long = "model-kind")]
    pub model_kind: Option<ModelKind>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub contexts_per_task: Option<usize>,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    verbose: u8,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn store_path(&self, arg: &StoreArg) -> Result<PathBuf> {
        self.cfg.path(arg.store.clone(), |p| &p.store, "--store")
    }

    fn model_path(&self, arg: &Option<PathBuf>) -> Result<PathBuf> {
        self.cfg.path(arg.clone(), |p| &p.model, "--model")
    }

    fn load_store(&self, arg: &StoreArg) -> Result<RecordStore> {
        let path = self.store_path(arg)?;
        self.log(format!("loading {}", path.display()));
        Ok(RecordStore::load(&path)?)
    }

    fn plan(&self, store: &RecordStore, args: &PlanArgs) -> Result<ExperimentPlan> {
        let plan = self.cfg.plan(store, args, self.seed)?;
        plan.validate()?;
        Ok(plan)
    }

    fn marketplace(&self, arg: &Option<PathBuf>) -> Result<MarketplaceConfig> {
        let path = arg.clone().or_else(|| self.cfg.paths.marketplace.clone());
        let mut m = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                MarketplaceConfig::from_toml(&text)?
            }
            None => self.cfg.marketplace.clone().unwrap_or_default(),
        };
        if let Some(seed) = self.cfg.explicit_seed {
            m.seed = seed;
        }
        Ok(m)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}\n\nRun `plugperf --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = if msg.is_empty() { text } else { format!("{msg}: {text}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.explicit_seed = cli.seed;
    }
    let seed = cfg.explicit_seed.unwrap_or(0);
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return Err(Usage("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let ctx = Ctx {
        cfg,
        seed,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Synth { out, marketplace } => synth(&ctx, &out, &marketplace),
        Command::Invoke {
            store,
            services,
            tasks,
            contexts,
            marketplace,
            service,
            task,
        } => invoke(&ctx, &store, services, tasks, contexts, &marketplace, service, task),
        Command::Extract { store, plan, out } => {
            let records = ctx.load_store(&store)?;
            let plan = ctx.plan(&records, &plan)?;
            let profiles = records
                .groups()
                .map(|(_, rs)| unlabeled_setting_profile(&plan, rs))
                .collect::<plugperf::Result<Vec<_>>>()?;
            write_profiles(&profiles, &out)?;
            println!("wrote {} profiles to {}", profiles.len(), out.display());
            Ok(())
        }
        Command::SelectFeatures { store, kinds } => {
            let records = ctx.load_store(&store)?;
            let (table, perf) = setting_table(&records, &kinds)?;
            let report = select_features(&table, &perf)?;
            let mut out = String::from("feature  corr(F1)\n");
            for k in report.correlations.features() {
                let r = report.correlations.get(plugperf::selection::Label::Feature(k), plugperf::selection::Label::Performance)?;
                let _ = writeln!(out, "{:<8} {r:>8.4}", k.as_str());
            }
            out.push_str("\nscore    subset\n");
            for s in &report.ranked {
                let names: Vec<&str> = s.features.iter().map(|k| k.as_str()).collect();
                let _ = writeln!(out, "{:>7.4}  {}", s.score, names.join("+"));
            }
            let best: Vec<&str> = report.best().iter().map(|k| k.as_str()).collect();
            let _ = writeln!(out, "\nselected: {}", best.join(","));
            print!("{out}");
            Ok(())
        }
        Command::Train { store, plan, model } => {
            let path = ctx.model_path(&model)?;
            let records = ctx.load_store(&store)?;
            let plan = ctx.plan(&records, &plan)?;
            let rows = setting_rows(&plan, &records)?;
            ctx.log(format!("training {} on {} settings", plan.model_specs[0].label(), rows.len()));
            let trained = train(&plan.model_specs[0], &rows, plan.seed)?;
            save_model(&trained, &path)?;
            println!("trained {} on {} settings -> {}", trained.spec.label(), rows.len(), path.display());
            Ok(())
        }
        Command::Estimate { store, model, unlabeled_n } => {
            let model_path = ctx.model_path(&model)?;
            let records = ctx.load_store(&store)?;
            let model = load_model(model_path)?;
            let plan = estimation_plan(&ctx, &records, &model, unlabeled_n)?;
            let mut out = String::from("service\ttask\tcontext\testimate\ttrue\n");
            for (key, rs) in records.groups() {
                let est = model.predict(&unlabeled_setting_profile(&plan, rs)?)?;
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{est:.4}\t{}",
                    key.service_id,
                    key.task_id,
                    key.context_id,
                    truth_cell(task_performance(rs).ok())
                );
            }
            print!("{out}");
            Ok(())
        }
        Command::Evaluate { store, plan, report } => {
            let path = ctx.cfg.path(report, |p| &p.report, "--report")?;
            let records = ctx.load_store(&store)?;
            let plan = ctx.plan(&records, &plan)?;
            let result = run_experiment(&plan, &records)?;
            std::fs::write(&path, result.to_json()).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", result.render_table());
            println!("report: {}", path.display());
            Ok(())
        }
        Command::Select {
            store,
            model,
            task,
            unlabeled_n,
        } => {
            let model_path = ctx.model_path(&model)?;
            let records = ctx.load_store(&store)?;
            let model = load_model(model_path)?;
            let (mut cands, truth) = candidates(&ctx, &records, &model, &task, unlabeled_n)?;
            let pick = select_setting(&cands)?.clone();
            cands.sort_by(|a, b| {
                b.estimate
                    .total_cmp(&a.estimate)
                    .then_with(|| (&a.service_id, &a.context_id).cmp(&(&b.service_id, &b.context_id)))
            });
            let mut out = String::from("rank\tservice\tcontext\testimate\ttrue\n");
            for (i, c) in cands.iter().enumerate() {
                let t = truth.get(&(c.service_id.clone(), c.context_id.clone())).copied().flatten();
                let _ = writeln!(out, "{}\t{}\t{}\t{:.4}\t{}", i + 1, c.service_id, c.context_id, c.estimate, truth_cell(t));
            }
            let _ = writeln!(out, "\nselected: {} {}", pick.service_id, pick.context_id);
            print!("{out}");
            Ok(())
        }
        Command::RecommendFinetune {
            store,
            model,
            task,
            unlabeled_n,
            marketplace,
        } => {
            let model_path = ctx.model_path(&model)?;
            let records = ctx.load_store(&store)?;
            let model = load_model(model_path)?;
            let (cands, truth) = candidates(&ctx, &records, &model, &task, unlabeled_n)?;
            let mut est: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut real: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for c in &cands {
                est.entry(c.service_id.clone()).or_default().push(c.estimate);
                if let Some(Some(t)) = truth.get(&(c.service_id.clone(), c.context_id.clone())) {
                    real.entry(c.service_id.clone()).or_default().push(*t);
                }
            }
            let means: BTreeMap<String, f64> = est.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
            let gains = match marketplace.is_some() || ctx.cfg.paths.marketplace.is_some() {
                true => Some(simulated_gains(&ctx, &marketplace, &cands)?),
                false => None,
            };
            let mut out = String::from("rank\tservice\testimate\ttrue");
            if gains.is_some() {
                out.push_str("\tsim_diff");
            }
            out.push('\n');
            for (i, s) in rank_finetune_targets(&means).iter().enumerate() {
                let t = real.get(s).filter(|v| v.len() == est[s].len()).map(|v| mean(v));
                let _ = write!(out, "{}\t{s}\t{:.4}\t{}", i + 1, means[s], truth_cell(t));
                if let Some(g) = &gains {
                    let _ = write!(out, "\t{:+.4}", g[s]);
                }
                out.push('\n');
            }
            print!("{out}");
            Ok(())
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn truth_cell(t: Option<f64>) -> String {
    t.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Profiles must be built exactly as the model's training profiles were.
fn estimation_plan(
    ctx: &Ctx,
    store: &RecordStore,
    model: &TrainedMetaModel,
    unlabeled_n: Option<usize>,
) -> Result<ExperimentPlan> {
    let args = PlanArgs {
        unlabeled_n,
        d: Some(model.dims),
        kinds: Some(model.kinds.clone()),
        ..Default::default()
    };
    ctx.plan(store, &args)
}

type Truth = BTreeMap<(String, String), Option<f64>>;

fn candidates(
    ctx: &Ctx,
    store: &RecordStore,
    model: &TrainedMetaModel,
    task: &str,
    unlabeled_n: Option<usize>,
) -> Result<(Vec<SettingCandidate>, Truth)> {
    let plan = estimation_plan(ctx, store, model, unlabeled_n)?;
    let mut cands = Vec::new();
    let mut truth = Truth::new();
    for (key, rs) in store.groups().filter(|(k, _)| k.task_id == task) {
        let profile = unlabeled_setting_profile(&plan, rs)?;
        cands.push(SettingCandidate {
            service_id: key.service_id.clone(),
            context_id: key.context_id.clone(),
            estimate: model.predict(&profile)?,
            profile,
        });
        truth.insert((key.service_id.clone(), key.context_id.clone()), task_performance(rs).ok());
    }
    if cands.is_empty() {
        anyhow::bail!("no settings of task `{task}` in the store");
    }
    Ok((cands, truth))
}

/// Mean gain in true performance from the marketplace's fine-tuned variant
/// of each candidate service, over the candidate contexts.
fn simulated_gains(ctx: &Ctx, path: &Option<PathBuf>, cands: &[SettingCandidate]) -> Result<BTreeMap<String, f64>> {
    let market = MockMarketplace::new(ctx.marketplace(path)?)?;
    let tuned = market.finetuned();
    let mut gains: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in cands {
        let key = SettingKey::new(&c.service_id, &c.profile.task_id, &c.context_id);
        let g = tuned.true_performance(&key)? - market.true_performance(&key)?;
        gains.entry(c.service_id.clone()).or_default().push(g);
    }
    Ok(gains.into_iter().map(|(k, v)| (k, mean(&v))).collect())
}

/// Writes `records.jsonl`, `tasks.jsonl`, `contexts.json`, `services.toml`
/// and `marketplace.toml` under `out`. Rerunning with the same inputs is a
/// no-op; an existing store with different content is left untouched.
fn synth(ctx: &Ctx, out: &Path, marketplace: &Option<PathBuf>) -> Result<()> {
    let config = ctx.marketplace(marketplace)?;
    let market = MockMarketplace::new(config.clone())?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let tmp = tempdir_in(out)?;
    let store = market.record_store();
    store.write(tmp.join("records.jsonl"))?;
    write_tasks(&market.datasets(), tmp.join("tasks.jsonl"))?;
    let contexts: BTreeMap<String, Vec<ContextSpec>> = market
        .task_ids()
        .into_iter()
        .map(|t| Ok((t.clone(), market.contexts(&t)?.to_vec())))
        .collect::<plugperf::Result<_>>()?;
    std::fs::write(tmp.join("contexts.json"), serde_json::to_string_pretty(&contexts)? + "\n")?;
    let services = ServiceConfig {
        concurrency: 4,
        services: market.descriptors(),
    };
    std::fs::write(tmp.join("services.toml"), services.to_toml())?;
    std::fs::write(tmp.join("marketplace.toml"), config.to_toml())?;

    let names = ["records.jsonl", "tasks.jsonl", "contexts.json", "services.toml", "marketplace.toml"];
    for name in names {
        let target = out.join(name);
        if target.exists() {
            let same = std::fs::read(&target)? == std::fs::read(tmp.join(name))?;
            if !same {
                std::fs::remove_dir_all(&tmp).ok();
                anyhow::bail!("{} exists with different content; refusing to overwrite", target.display());
            }
        }
    }
    for name in names {
        let target = out.join(name);
        if !target.exists() {
            std::fs::rename(tmp.join(name), &target)?;
        }
    }
    std::fs::remove_dir_all(&tmp).ok();
    println!(
        "synthesized {} records ({} services x {} tasks x {} contexts) in {}",
        store.len(),
        config.n_services,
        config.n_tasks,
        config.contexts_per_task,
        out.display()
    );
    Ok(())
}

fn tempdir_in(dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!(".synth-{}", std::process::id()));
    std::fs::create_dir_all(&path)?;
    Ok(path)
}

#[allow(clippy::too_many_arguments)]
fn invoke(
    ctx: &Ctx,
    store: &StoreArg,
    services: Option<PathBuf>,
    tasks: Option<PathBuf>,
    contexts: Option<PathBuf>,
    marketplace: &Option<PathBuf>,
    only_service: Option<String>,
    only_task: Option<String>,
) -> Result<()> {
    let store_path = ctx.store_path(store)?;
    let services = ServiceConfig::load(ctx.cfg.path(services, |p| &p.services, "--services")?)?;
    let tasks = read_tasks(ctx.cfg.path(tasks, |p| &p.tasks, "--tasks")?)?;
    let contexts_path = ctx.cfg.path(contexts, |p| &p.contexts, "--contexts")?;
    let contexts: BTreeMap<String, Vec<ContextSpec>> = serde_json::from_str(
        &std::fs::read_to_string(&contexts_path).with_context(|| format!("reading {}", contexts_path.display()))?,
    )
    .with_context(|| format!("parsing {}", contexts_path.display()))?;

    let needs_mock = services.services.iter().any(|s| s.kind == ServiceKind::Mock);
    let market = match needs_mock {
        true => Some(MockMarketplace::new(ctx.marketplace(marketplace)?)?),
        false => None,
    };
    let cache = InvocationCache::open(&store_path)?;
    let (mut invoked, mut cached) = (0, 0);
    for desc in &services.services {
        if only_service.as_ref().is_some_and(|s| s != &desc.service_id) {
            continue;
        }
        let mock;
        let http;
        let service: &dyn LlmService = match desc.kind {
            ServiceKind::Mock => {
                mock = market.as_ref().expect("marketplace loaded").service(&desc.service_id)?;
                &mock
            }
            ServiceKind::Http => {
                http = HttpService::new(desc.clone())?;
                &http
            }
        };
        for task in &tasks {
            if only_task.as_ref().is_some_and(|t| t != &task.task_id) {
                continue;
            }
            let task_contexts = contexts
                .get(&task.task_id)
                .with_context(|| format!("no contexts for task `{}`", task.task_id))?;
            for c in task_contexts {
                ctx.log(format!("{} {} {}", desc.service_id, task.task_id, c.context_id));
                let s = cache.invoke_task(service, task, c, "completion-v1", services.concurrency)?;
                invoked += s.invoked;
                cached += s.cached;
            }
        }
    }
    println!("invoked {invoked}, cached {cached} -> {}", store_path.display());
    Ok(())
}
