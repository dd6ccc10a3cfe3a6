use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rlaas::client::plot::{plot, Series};
use rlaas::client::{
    install_interrupt_handler, interrupted, multi_agent_fit, read_metrics, read_spec, rl_fit, run_inference,
    ClientError, Convergence, SchedulerClient, TrainLoopConfig,
};
use rlaas::coordinator::{Coordinator, ProtocolSpec};
use rlaas::env::{run_env_server, EnvKind, EnvServerConfig};
use rlaas::scheduler::{start_scheduler, SchedulerConfig};
use rlaas::task_server::service::{run_task_process, TaskProcessConfig};
use rlaas::types::{CheckpointRef, JobSpec};

const DEFAULT_SCHEDULER: &str = "127.0.0.1:7070";

#[derive(Parser)]
#[command(name = "rlaas", version, about = "Desk-scale reinforcement learning as a service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SchedulerAddr {
    /// Scheduler address.
    #[arg(long, env = "RLAAS_SCHEDULER", default_value = DEFAULT_SCHEDULER)]
    scheduler: String,
}

#[derive(Args, Clone)]
struct LoopArgs {
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long, default_value_t = 10)]
    validate_every: u64,
    #[arg(long, default_value_t = 100)]
    validation_episodes: usize,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Train for all steps instead of stopping when validation plateaus.
    #[arg(long)]
    no_early_stop: bool,
    /// JSON-lines metrics log.
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Write the final report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl LoopArgs {
    fn config(&self) -> TrainLoopConfig {
        TrainLoopConfig {
            total_steps: self.steps,
            validate_every: self.validate_every.min(self.steps.max(1)),
            validation_episodes: self.validation_episodes,
            checkpoint_every: self.checkpoint_every,
            convergence: (!self.no_early_stop).then(Convergence::default),
            metrics_path: Some(self.metrics.clone()),
            ..TrainLoopConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the scheduler.
    Scheduler {
        #[arg(long, default_value = DEFAULT_SCHEDULER)]
        bind: String,
        /// Slot pool entries like gpu=8; repeatable.
        #[arg(long, default_value = "gpu=8")]
        capacity: Vec<String>,
        /// Seconds between expected heartbeats.
        #[arg(long, default_value_t = 5.0)]
        heartbeat_interval: f64,
        /// Seconds a task server gets to stop before it is killed.
        #[arg(long, default_value_t = 5.0)]
        grace: f64,
        /// Seconds finished jobs stay queryable.
        #[arg(long, default_value_t = 600.0)]
        retention: f64,
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Task-server executable; defaults to this binary.
        #[arg(long)]
        task_exe: Option<PathBuf>,
    },
    /// Run an environment server.
    EnvServer {
        #[arg(long, default_value = "127.0.0.1:7071")]
        bind: String,
        #[arg(long, default_value = "gomoku")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        max_parallel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Host a coordinator for this protocol (JSON ProtocolSpec).
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Seconds an agent may stall a barrier before the round aborts.
        #[arg(long, default_value_t = 60.0)]
        barrier_timeout: f64,
    },
    /// Run one task server; normally launched by the scheduler.
    TaskServer {
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
        #[arg(long)]
        job_spec: PathBuf,
        #[arg(long, default_value = "local")]
        job_id: String,
        #[arg(long)]
        ckpt_store: Option<PathBuf>,
        #[arg(long)]
        scheduler: Option<String>,
        #[arg(long, default_value_t = 5000)]
        heartbeat_interval_ms: u64,
        /// Test hook: acknowledge terminate requests but keep running.
        #[arg(long)]
        hang_on_terminate: bool,
    },
    /// Submit a job spec.
    Submit {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Show a job's handle.
    Status {
        job: String,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Terminate a job.
    Terminate {
        job: String,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Submit a training job and drive it.
    Fit {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        loop_args: LoopArgs,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Run inference episodes from a checkpoint.
    Infer {
        #[arg(long)]
        spec: PathBuf,
        /// Checkpoint version; LATEST when omitted.
        #[arg(long)]
        ckpt: Option<u64>,
        /// Checkpoint store; overrides the spec's.
        #[arg(long)]
        store: Option<String>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Train one agent per spec in a shared two-agent environment.
    Mfit {
        /// Directory of per-agent job specs, taken in file-name order.
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[command(flatten)]
        loop_args: LoopArgs,
        #[command(flatten)]
        addr: SchedulerAddr,
    },
    /// Render validation curves from metrics logs.
    Plot {
        #[arg(long, required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Client(ClientError),
    Io(std::io::Error),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Client(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

fn parse_capacity(entries: &[String]) -> Result<BTreeMap<String, u32>, Failure> {
    let mut out = BTreeMap::new();
    for e in entries {
        let (k, v) = e.split_once('=').ok_or_else(|| Failure::Usage(format!("capacity {e:?} is not NAME=SLOTS")))?;
        let n = v.parse().map_err(|_| Failure::Usage(format!("capacity {e:?}: bad slot count")))?;
        out.insert(k.to_string(), n);
    }
    Ok(out)
}

fn read_protocol(path: &Path) -> Result<ProtocolSpec, Failure> {
    let text = std::fs::read_to_string(path)?;
    let spec: ProtocolSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn announce(addr: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "READY {addr}")?;
    out.flush()?;
    Ok(())
}

fn wait_for_interrupt() {
    install_interrupt_handler();
    while !interrupted() {
        thread::sleep(Duration::from_millis(100));
    }
}

fn write_report(path: Option<&PathBuf>, report: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(report).expect("serializable"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Scheduler { bind, capacity, heartbeat_interval, grace, retention, work_dir, task_exe } => {
            let mut config = SchedulerConfig {
                capacity: parse_capacity(&capacity)?,
                heartbeat_interval: secs(heartbeat_interval),
                grace: secs(grace),
                retention: secs(retention),
                ..SchedulerConfig::default()
            };
            if let Some(dir) = work_dir {
                config.work_dir = dir;
            }
            if let Some(exe) = task_exe {
                config.task_exe = exe;
            }
            let server = start_scheduler(config, &bind)?;
            announce(&server.addr())?;
            wait_for_interrupt();
            log::info!("scheduler shutting down");
            drop(server);
            Ok(())
        }
        Command::EnvServer { bind, kind, max_parallel, seed, protocol, barrier_timeout } => {
            let default_kind: EnvKind = kind.parse().map_err(|e| Failure::Usage(format!("--kind: {e}")))?;
            let coordinator = match protocol {
                Some(p) => Some(Arc::new(
                    Coordinator::with_timeout(read_protocol(&p)?, secs(barrier_timeout)).map_err(Failure::Usage)?,
                )),
                None => None,
            };
            let config = EnvServerConfig {
                bind,
                default_kind,
                server_seed: seed,
                max_parallel,
                coordinator,
                ..EnvServerConfig::default()
            };
            let server = run_env_server(config)?;
            announce(&server.addr())?;
            wait_for_interrupt();
            Ok(())
        }
        Command::TaskServer { bind, job_spec, job_id, ckpt_store, scheduler, heartbeat_interval_ms, hang_on_terminate } => {
            let spec = read_spec(&job_spec)?;
            run_task_process(TaskProcessConfig {
                bind,
                job_id,
                spec,
                ckpt_store,
                scheduler,
                heartbeat_interval: Duration::from_millis(heartbeat_interval_ms.max(1)),
                hang_on_terminate,
            })?;
            Ok(())
        }
        Command::Submit { spec, addr } => {
            let spec = read_spec(&spec)?;
            print_json(&SchedulerClient::connect(&addr.scheduler)?.submit(&spec)?);
            Ok(())
        }
        Command::Status { job, addr } => {
            print_json(&SchedulerClient::connect(&addr.scheduler)?.status(&job)?);
            Ok(())
        }
        Command::Terminate { job, addr } => {
            print_json(&SchedulerClient::connect(&addr.scheduler)?.terminate(&job)?);
            Ok(())
        }
        Command::Fit { spec, loop_args, addr } => {
            install_interrupt_handler();
            let spec = read_spec(&spec)?;
            let report = rl_fit(&addr.scheduler, &spec, &loop_args.config())?;
            write_report(loop_args.report.as_ref(), &report)?;
            let last = report.validation.last();
            println!(
                "{}: {} steps, final validation mean {:.3} win-rate {:.3}, status {}",
                report.job_id,
                report.train.len(),
                last.map_or(0.0, |v| v.mean),
                last.map_or(0.0, |v| v.win_rate),
                report.final_status.map_or("?".to_string(), |s| s.to_string())
            );
            Ok(())
        }
        Command::Infer { spec, ckpt, store, episodes, addr } => {
            install_interrupt_handler();
            let mut spec: JobSpec = read_spec(&spec)?;
            match (&mut spec.checkpoint_init, store) {
                (_, Some(store)) => spec.checkpoint_init = Some(CheckpointRef { store, version: ckpt }),
                (Some(r), None) => r.version = ckpt.or(r.version),
                (None, None) => return Err(Failure::Client(ClientError::CheckpointRequired)),
            }
            let report = run_inference(&addr.scheduler, &spec, episodes)?;
            print_json(&report);
            Ok(())
        }
        Command::Mfit { specs, protocol, loop_args, addr } => {
            install_interrupt_handler();
            let protocol = read_protocol(&protocol)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&specs)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            let specs = files.iter().map(|p| read_spec(p)).collect::<Result<Vec<_>, _>>()?;
            let report = multi_agent_fit(&addr.scheduler, &specs, &protocol, &loop_args.config())?;
            write_report(loop_args.report.as_ref(), &report)?;
            for (agent, r) in &report.agents {
                let curve: Vec<String> = r.validation.iter().map(|v| format!("{:.2}", v.win_rate)).collect();
                println!("{agent}: win-rate vs random [{}]", curve.join(", "));
            }
            println!("zero-sum audit: {} games, {} violations", report.audited_games, report.zero_sum_violations);
            Ok(())
        }
        Command::Plot { metrics, out } => {
            let mut series = Vec::new();
            for m in &metrics {
                let label = m.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics").to_string();
                series.push(Series::validation(&label, &read_metrics(m)?));
            }
            plot(&series, &out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Client(e)) => {
            match &e {
                ClientError::Remote { code, .. } if code == "UnknownJob" => eprintln!("error: unknown job ({e})"),
                _ => eprintln!("error: {e}"),
            }
            match e.code() {
                "UnknownJob" | "InvalidSpec" | "Oversubscribed" | "CheckpointRequired" => ExitCode::from(2),
                "Interrupted" => ExitCode::from(130),
                _ => ExitCode::FAILURE,
            }
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
