//! Command-line definitions and their implementations.

use std::fs;
use std::io::{self, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use banditloop_core::acceptance::{self, AcceptanceError};
use banditloop_core::exploration::{ExplorationConfig, Explorer};
use banditloop_core::learner::CiParams;
use banditloop_core::offline::{self, Corruption, ExperimentOptions, OverrideTarget, TrainEstimate};
use banditloop_core::policy::{decode_model, FixedAction, Policy};
use banditloop_core::replay::verify_run;
use banditloop_core::service::{LocalService, ServiceConfig};
use banditloop_core::sim::{run_loop, LoopConfig, SyntheticEnvironment};
use banditloop_core::store::Store;
use banditloop_core::types::{ActionIndex, Context, EventKey, EventTime, FeatureSet, Namespace, Reward};
use banditloop_core::{Dataset, DirStore, JoinedInteraction, Learner, LearnerConfig, MemStore};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "banditloop", version, about = "Contextual-bandit decision loop: simulate, serve, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the full loop against a synthetic environment and print the metrics report.
    Run(RunArgs),
    /// Print a preset environment as JSON, for editing and `run --env-file`.
    Env {
        #[arg(long, default_value = "stationary")]
        preset: String,
        /// Event count the preset's drift points are laid out for.
        #[arg(long, default_value_t = 20_000)]
        events: u64,
    },
    /// Print a loop config as TOML.
    Config(LoopArgs),
    /// Run acceptance criteria; exits nonzero when one fails.
    Acceptance {
        /// Suite name or "all".
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Multi-threaded decision throughput and single-threaded learner throughput.
    Throughput {
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 200_000)]
        decisions: u64,
        #[arg(long, default_value_t = 10)]
        actions: usize,
    },
    /// Offline IPS estimate of a policy on a logged dataset.
    Evaluate(EvaluateArgs),
    /// Split a dataset into train and test parts.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply a data-collection fault to a dataset.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        corruption: CorruptionArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a (corrupted) train split and compare its estimate with the test split.
    Discrepancy {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        corruption: CorruptionArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Compare a policy frozen after the first segment with fresh policies on later segments.
    Staleness {
        /// One dataset per segment, in time order.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Replay a store's journal and check every checkpoint and decision.
    Verify {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        loop_args: LoopArgs,
    },
    /// Serve decisions and rewards over HTTP with learning in the background.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Store directory; in-memory when absent.
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        loop_args: LoopArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct LoopArgs {
    /// Loop config TOML; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub app: Option<String>,
}

impl LoopArgs {
    pub fn resolve(&self) -> Result<LoopConfig> {
        let mut cfg = match &self.config {
            Some(p) => LoopConfig::from_toml(&read(p)?).with_context(|| format!("{}", p.display()))?,
            None => LoopConfig::standard(0.2, 0.01),
        };
        if let Some(e) = self.epsilon {
            cfg.epsilon0 = e;
        }
        if let Some(r) = self.rate {
            cfg.learner.learning_rate0 = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.app {
            cfg.app_id = a.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Preset environment.
    #[arg(long, default_value = "stationary", conflicts_with = "env_file")]
    pub env: String,
    /// Environment JSON (see `env`).
    #[arg(long)]
    pub env_file: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    pub events: u64,
    /// Store directory; in-memory when absent.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Write the per-window report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the joined interactions as a dataset.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub loop_args: LoopArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate the fixed policy that always picks this action (1-based).
    #[arg(long, group = "policy")]
    pub action: Option<u32>,
    /// Evaluate a model file.
    #[arg(long, group = "policy")]
    pub model: Option<PathBuf>,
    /// Evaluate a model from a store directory (latest unless --model-id).
    #[arg(long, group = "policy")]
    pub store: Option<PathBuf>,
    #[arg(long, requires = "store")]
    pub model_id: Option<u64>,
    /// Number of policies evaluated on the same data, for the confidence width.
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    OverrideActions,
    AddDecisionFeature,
    ModifyFeature,
    DeleteFeature,
    ShiftRewards,
}

#[derive(Debug, Args)]
pub struct CorruptionArgs {
    /// Fault to apply; none means clean data.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Share of records affected (override-actions, modify-feature).
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    /// Override target: "incumbent" or a 1-based action.
    #[arg(long, default_value = "incumbent")]
    pub target: String,
    #[arg(long, default_value = "user")]
    pub namespace: String,
    /// Replacement feature for modify-feature, as name=value; repeatable.
    #[arg(long = "default", value_parser = parse_feature)]
    pub defaults: Vec<(String, f64)>,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    /// Positions rewarded records move earlier; to the front when absent.
    #[arg(long)]
    pub lead: Option<usize>,
}

fn parse_feature(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected name=value")?;
    let v: f64 = v.parse().map_err(|e| format!("{v}: {e}"))?;
    Ok((k.to_owned(), v))
}

impl CorruptionArgs {
    pub fn corruption(&self) -> Result<Option<Corruption>> {
        let Some(mode) = self.mode else { return Ok(None) };
        Ok(Some(match mode {
            Mode::OverrideActions => Corruption::OverrideActions {
                fraction: self.fraction,
                target: match self.target.as_str() {
                    "incumbent" => OverrideTarget::Incumbent,
                    n => OverrideTarget::Fixed(ActionIndex::new(
                        n.parse().with_context(|| format!("target {n:?}"))?,
                    )?),
                },
            },
            Mode::AddDecisionFeature => Corruption::AddDecisionFeature,
            Mode::ModifyFeature => Corruption::ModifyFeature {
                namespace: self.namespace.clone(),
                fraction: self.fraction,
                defaults: self.defaults.iter().cloned().collect::<Namespace>(),
            },
            Mode::DeleteFeature => Corruption::DeleteFeature {
                namespace: self.namespace.clone(),
            },
            Mode::ShiftRewards => Corruption::ShiftRewards {
                top_k: self.top_k,
                lead: self.lead,
            },
        }))
    }
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Learning rate for the offline learner.
    #[arg(long, default_value_t = 0.0003)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Score the train side with the final policy instead of the progressive estimate.
    #[arg(long)]
    pub final_on_train: bool,
}

impl ExperimentArgs {
    fn options(&self) -> ExperimentOptions {
        ExperimentOptions {
            seed: self.seed,
            train_fraction: self.train_fraction,
            train_estimate: if self.final_on_train {
                TrainEstimate::FinalOnTrain
            } else {
                TrainEstimate::Progressive
            },
        }
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load(p: &Path) -> Result<Dataset> {
    Dataset::load(p).with_context(|| format!("loading {}", p.display()))
}

fn save(ds: &Dataset, p: &Path) -> Result<()> {
    ds.save(p).with_context(|| format!("writing {}", p.display()))
}

/// Pretty JSON on stdout. A closed pipe (`| head`) is not an error.
fn print_json(v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn open_store(dir: Option<&Path>) -> Result<Arc<dyn Store>> {
    Ok(match dir {
        Some(d) => Arc::new(DirStore::open(d).with_context(|| format!("opening store {}", d.display()))?),
        None => Arc::new(MemStore::new()),
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(args)?,
        Command::Env { preset, events } => {
            let env = SyntheticEnvironment::preset(&preset, events).ok_or_else(|| {
                anyhow!("unknown preset {preset:?}; one of {}", SyntheticEnvironment::PRESETS.join(", "))
            })?;
            print_json(&env)?;
        }
        Command::Config(args) => print!("{}", args.resolve()?.to_toml()),
        Command::Acceptance { suite } => return cmd_acceptance(&suite),
        Command::Throughput {
            threads,
            decisions,
            actions,
        } => cmd_throughput(threads, decisions, actions)?,
        Command::Evaluate(args) => cmd_evaluate(args)?,
        Command::Split {
            data,
            train,
            test,
            fraction,
            seed,
        } => {
            let (tr, te) = offline::split(&load(&data)?, fraction, seed)?;
            save(&tr, &train)?;
            save(&te, &test)?;
            eprintln!("train {} records, test {} records", tr.len(), te.len());
        }
        Command::Corrupt {
            data,
            out,
            corruption,
            seed,
        } => {
            let c = corruption.corruption()?.ok_or_else(|| anyhow!("--mode is required"))?;
            save(&offline::corrupt(&load(&data)?, &c, seed)?, &out)?;
        }
        Command::Discrepancy {
            data,
            corruption,
            experiment,
        } => {
            let c = corruption.corruption()?;
            let cfg = LearnerConfig::constant(experiment.rate);
            let rep = offline::discrepancy_experiment(&load(&data)?, c.as_ref(), &cfg, experiment.options())?;
            print_json(&rep)?;
        }
        Command::Staleness { data, experiment } => {
            let segments = data.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let cfg = LearnerConfig::constant(experiment.rate);
            print_json(&offline::staleness_experiment(&segments, &cfg, experiment.options())?)?;
        }
        Command::Verify { store, loop_args } => {
            let cfg = loop_args.resolve()?;
            let store = DirStore::open(&store).with_context(|| format!("opening store {}", store.display()))?;
            match verify_run(&cfg.effective_learner(), &cfg.exploration(), &store) {
                Ok(rep) => print_json(&rep)?,
                Err(d) => {
                    eprintln!("replay diverged: {d}");
                    print_json(&d)?;
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Serve {
            addr,
            store,
            loop_args,
        } => cmd_serve(addr, store.as_deref(), &loop_args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let env = match &args.env_file {
        Some(p) => {
            let mut env: SyntheticEnvironment =
                serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
            env.normalize()?;
            env
        }
        None => SyntheticEnvironment::preset(&args.env, args.events).ok_or_else(|| {
            anyhow!("unknown preset {:?}; one of {}", args.env, SyntheticEnvironment::PRESETS.join(", "))
        })?,
    };
    let cfg = args.loop_args.resolve()?;
    let store = open_store(args.store.as_deref())?;
    let t = Instant::now();
    let report = run_loop(&env, &cfg, args.events, Arc::clone(&store))?;
    log::info!("{} events in {:.2}s", args.events, t.elapsed().as_secs_f64());
    if let Some(p) = &args.csv {
        fs::write(p, report.windows_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.log {
        save(&Dataset::new(store.read_all_interactions()?)?, p)?;
    }
    print_json(&report)
}

fn cmd_acceptance(suite: &str) -> Result<ExitCode> {
    let results = match acceptance::run(suite) {
        Ok(r) => r,
        Err(e @ AcceptanceError::UnknownSuite(_)) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(2));
        }
    };
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ds = load(&args.data)?;
    let policy: Box<dyn Policy> = if let Some(a) = args.action {
        Box::new(FixedAction(ActionIndex::new(a)?))
    } else {
        let bytes = if let Some(p) = &args.model {
            fs::read(p).with_context(|| format!("reading {}", p.display()))?
        } else if let Some(dir) = &args.store {
            open_store(Some(dir))?.get_model(args.model_id)?
        } else {
            bail!("one of --action, --model or --store is required");
        };
        Box::new(decode_model(&bytes)?.0)
    };
    let params = CiParams {
        k: args.k,
        delta: args.delta,
        ..CiParams::default()
    };
    print_json(&offline::ips_evaluate(&ds, policy.as_ref(), params)?)
}

#[derive(Serialize)]
struct ThroughputReport {
    threads: usize,
    actions: usize,
    decisions: u64,
    decision_seconds: f64,
    decisions_per_second: f64,
    learner_events: u64,
    learner_events_per_second: f64,
}

fn synthetic_context(i: u64, actions: usize) -> Context {
    let shared = FeatureSet::new().with("user", &format!("u{}", i % 97), 1.0);
    let acts = (0..actions)
        .map(|j| {
            FeatureSet::new()
                .with("item", &format!("i{j}"), 1.0)
                .with("topic", &format!("t{}", (i as usize + j) % 13), 1.0)
        })
        .collect();
    Context::new(shared, acts).expect("at least one action")
}

fn cmd_throughput(threads: usize, decisions: u64, actions: usize) -> Result<()> {
    if threads == 0 || actions == 0 {
        bail!("threads and actions must be positive");
    }
    // A model with nonzero weights so scoring does real work.
    let learner_events = 20_000u64;
    let mut learner = Learner::new(LearnerConfig::constant(0.01))?;
    let t = Instant::now();
    for i in 0..learner_events {
        let ctx = synthetic_context(i, actions);
        let a = ActionIndex::from_zero_based((i as usize * 7) % actions);
        learner.train_step(&JoinedInteraction {
            key: EventKey::new(format!("t{i}"))?,
            context: ctx,
            action: a,
            probability: 1.0 / actions as f64,
            reward: if i % 3 == 0 { Reward::ONE } else { Reward::ZERO },
            decision_time: EventTime(i),
            emit_time: EventTime(i),
            model_id: 0,
        })?;
    }
    let learn_secs = t.elapsed().as_secs_f64();

    let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("bench", 0.2))?;
    explorer.install(learner.policy().clone());
    let contexts: Vec<Context> = (0..97).map(|i| synthetic_context(i, actions)).collect();
    let per_thread = decisions / threads as u64;
    let t = Instant::now();
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|th| {
                let (explorer, contexts) = (&explorer, &contexts);
                s.spawn(move || -> Result<()> {
                    for i in 0..per_thread {
                        let key = EventKey::new(format!("d{th}-{i}"))?;
                        explorer.choose_action(key, contexts[i as usize % contexts.len()].clone(), EventTime(i))?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().map_err(|_| anyhow!("worker panicked"))??;
        }
        Ok(())
    })?;
    let secs = t.elapsed().as_secs_f64();
    let total = per_thread * threads as u64;
    print_json(&ThroughputReport {
        threads,
        actions,
        decisions: total,
        decision_seconds: secs,
        decisions_per_second: total as f64 / secs,
        learner_events,
        learner_events_per_second: learner_events as f64 / learn_secs,
    })
}

fn cmd_serve(addr: SocketAddr, store: Option<&Path>, loop_args: &LoopArgs) -> Result<()> {
    let cfg = loop_args.resolve()?;
    let app = cfg.app_id.clone();
    let svc = Arc::new(LocalService::start(ServiceConfig::new(cfg), open_store(store)?)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("serving app {app:?} on http://{}", listener.local_addr()?);
        eprintln!("serving app {app:?} on http://{}", listener.local_addr()?);
        axum::serve(listener, crate::server::router(Arc::clone(&svc)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    drop(rt);
    let svc = Arc::try_unwrap(svc).map_err(|_| anyhow!("service still referenced after shutdown"))?;
    let status = svc.shutdown()?;
    print_json(&status)
}
