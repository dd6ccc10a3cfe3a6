//! Wire surface and process entry point of a task server.

use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{GenerateRequest, TaskError, TaskServer, TaskSettings};
use crate::coordinator::{CoordinatorApi, RemoteCoordinator};
use crate::env::{EnvBackend, EnvHost, EnvKind, RemoteEnv};
use crate::policy::CheckpointStore;
use crate::protocol::MessageKind;
use crate::rpc::{bind, parse_payload, serve, to_payload, RpcClient, ServiceError};
use crate::types::{EnvEndpoint, JobSpec, JobType};

impl From<TaskError> for ServiceError {
    fn from(e: TaskError) -> Self {
        ServiceError::new(e.code(), e.to_string())
    }
}

#[derive(Debug, Default, Deserialize)]
struct TrainStepRequest {
    #[serde(default)]
    group_size: Option<usize>,
    #[serde(default)]
    env_seed_base: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
struct ValidateRequest {
    #[serde(default)]
    num_episodes: Option<usize>,
    #[serde(default)]
    seed_base: Option<u64>,
    /// Return per-episode scores and transcripts instead of aggregates.
    #[serde(default)]
    transcripts: bool,
}

/// `version` is a number or the string "LATEST".
fn parse_version(v: Option<&Value>) -> Result<Option<u64>, ServiceError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.eq_ignore_ascii_case("latest") => Ok(None),
        Some(Value::Number(n)) => n.as_u64().map(Some).ok_or_else(|| ServiceError::bad_request("bad version")),
        Some(other) => Err(ServiceError::bad_request(format!("bad version {other}"))),
    }
}

pub struct TaskService {
    server: Arc<TaskServer>,
    job_id: String,
    stop: Mutex<Option<mpsc::Sender<()>>>,
    hang_on_terminate: bool,
}

impl TaskService {
    pub fn new(server: Arc<TaskServer>, job_id: &str, stop: mpsc::Sender<()>, hang_on_terminate: bool) -> Self {
        TaskService { server, job_id: job_id.to_string(), stop: Mutex::new(Some(stop)), hang_on_terminate }
    }

    pub fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError> {
        let s = &self.server;
        match kind {
            MessageKind::TrainStep => {
                let req: TrainStepRequest = parse_payload(payload)?;
                to_payload(&s.train_step(req.group_size, req.env_seed_base)?)
            }
            MessageKind::Validate => {
                let req: ValidateRequest = parse_payload(payload)?;
                if req.transcripts {
                    let n = req.num_episodes.unwrap_or(s.settings().validation_episodes);
                    let episodes: Vec<Value> = s
                        .evaluate(n, req.seed_base)?
                        .iter()
                        .map(|t| {
                            json!({
                                "episode_id": t.episode_id,
                                "score": t.episode_return(),
                                "transcript": crate::policy::codec::decode(&t.tokens()),
                            })
                        })
                        .collect();
                    return Ok(json!({ "episodes": episodes }));
                }
                to_payload(&s.validate(req.num_episodes, req.seed_base)?)
            }
            MessageKind::Generate => {
                let req: GenerateRequest = parse_payload(payload)?;
                Ok(json!({ "text": s.generate(&req)? }))
            }
            MessageKind::SaveCheckpoint => Ok(json!({ "version": s.save_checkpoint()? })),
            MessageKind::LoadCheckpoint => {
                let version = parse_version(payload.get("version"))?;
                Ok(json!({ "version": s.load_checkpoint(version)? }))
            }
            MessageKind::Heartbeat => Ok(json!({
                "job_id": self.job_id,
                "step": s.step_counter(),
                "stopping": s.is_stopping(),
            })),
            MessageKind::TerminateJob => {
                if self.hang_on_terminate {
                    log::warn!("ignoring terminate request");
                    return Ok(json!({ "job_id": self.job_id }));
                }
                s.begin_stop();
                if let Some(tx) = self.stop.lock().unwrap_or_else(|p| p.into_inner()).take() {
                    let _ = tx.send(());
                }
                Ok(json!({ "job_id": self.job_id }))
            }
            other => Err(ServiceError::new("UnsupportedKind", format!("task server does not handle {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskProcessConfig {
    pub bind: String,
    pub job_id: String,
    pub spec: JobSpec,
    pub ckpt_store: Option<PathBuf>,
    /// Scheduler address for heartbeats and metric relay.
    pub scheduler: Option<String>,
    pub heartbeat_interval: Duration,
    /// Testing aid: acknowledge terminate but keep running.
    pub hang_on_terminate: bool,
}

fn env_backend(endpoint: &EnvEndpoint, kind: EnvKind) -> Result<Arc<dyn EnvBackend>, TaskError> {
    Ok(match endpoint {
        EnvEndpoint::Local => Arc::new(EnvHost::new(kind)),
        EnvEndpoint::Remote(addr) => Arc::new(RemoteEnv::connect(addr).map_err(|e| TaskError::EnvUnreachable(e.to_string()))?),
    })
}

/// Builds the task server for `config`. Two-agent jobs use the coordinator
/// named in the hyperparameters, or the one hosted by the env server.
pub fn build_server(config: &TaskProcessConfig) -> Result<TaskServer, TaskError> {
    let settings = TaskSettings::from_spec(&config.job_id, &config.spec).map_err(TaskError::BadRequest)?;
    let env = env_backend(&config.spec.env_endpoint, settings.env_kind)?;
    let coordinator: Option<Arc<dyn CoordinatorApi>> = if settings.is_multi_agent() {
        let addr = match (&settings.coordinator, &config.spec.env_endpoint) {
            (Some(a), _) => a.clone(),
            (None, EnvEndpoint::Remote(a)) => a.clone(),
            (None, EnvEndpoint::Local) => {
                return Err(TaskError::BadRequest("two-agent jobs need a coordinator address".into()));
            }
        };
        Some(Arc::new(RemoteCoordinator::connect(&addr)?))
    } else {
        None
    };
    let store = match &config.ckpt_store {
        Some(dir) => Some(CheckpointStore::open(dir)?),
        None => None,
    };
    if config.spec.job_type == JobType::Inference && settings.checkpoint_init.is_none() {
        return Err(TaskError::BadRequest("CheckpointRequired".into()));
    }
    TaskServer::new(settings, env, store, coordinator)
}

/// Runs a task server process: binds, prints `READY <addr>`, heartbeats the
/// scheduler and serves until terminated.
pub fn run_task_process(config: TaskProcessConfig) -> io::Result<()> {
    let mut server = build_server(&config).map_err(|e| io::Error::other(e.to_string()))?;
    let scheduler = match &config.scheduler {
        Some(addr) => Some(Arc::new(RpcClient::connect(addr).map_err(|e| io::Error::other(e.to_string()))?)),
        None => None,
    };
    if let Some(sched) = scheduler.clone() {
        let job_id = config.job_id.clone();
        server.set_metric_sink(move |kind, step, report| {
            let mut metric = report.as_object().cloned().unwrap_or_default();
            metric.insert("kind".into(), json!(kind));
            metric.insert("step".into(), json!(step));
            let payload = json!({ "job_id": job_id, "metric": metric });
            if let Value::Object(p) = payload {
                if let Err(e) = sched.call(MessageKind::StreamMetric, p) {
                    log::warn!("metric relay failed: {e}");
                }
            }
        });
    }
    let server = Arc::new(server);
    let (stop_tx, stop_rx) = mpsc::channel();
    let service = Arc::new(TaskService::new(server.clone(), &config.job_id, stop_tx, config.hang_on_terminate));
    let listener = bind(&config.bind)?;
    let mut handle = serve(listener, Arc::new(move |kind, payload| service.handle(kind, payload)))?;
    let addr = handle.addr_string();
    {
        let mut out = io::stdout().lock();
        writeln!(out, "READY {addr}")?;
        out.flush()?;
    }
    log::info!("task server {} ready on {addr}", config.job_id);

    if let Some(sched) = scheduler {
        let job_id = config.job_id.clone();
        let interval = config.heartbeat_interval;
        let addr = addr.clone();
        thread::spawn(move || {
            let mut misses = 0;
            loop {
                let mut p = Map::new();
                p.insert("job_id".into(), json!(job_id));
                p.insert("source".into(), json!("server"));
                p.insert("endpoint".into(), json!(addr));
                match sched.call_with_timeout(MessageKind::Heartbeat, p, Some(interval.max(Duration::from_secs(1)))) {
                    Ok(_) => misses = 0,
                    Err(e) if e.is_transport() => {
                        misses += 1;
                        log::warn!("heartbeat failed: {e}");
                        // nobody is left to terminate us
                        if misses >= 3 {
                            log::error!("scheduler gone; exiting");
                            std::process::exit(3);
                        }
                    }
                    Err(e) => log::warn!("heartbeat rejected: {e}"),
                }
                thread::sleep(interval);
            }
        });
    }

    let _ = stop_rx.recv();
    // let the terminate reply reach the caller before the sockets close
    thread::sleep(Duration::from_millis(50));
    handle.stop();
    Ok(())
}
