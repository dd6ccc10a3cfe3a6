//! Client library: scheduler and task-server connections, the lifecycle
//! guard, and the training/inference driver loops.

mod fit;
pub mod plot;

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, Once};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::protocol::MessageKind;
use crate::rpc::{RpcClient, RpcError};
use crate::task_server::{TrainStepReport, ValidationReport};
use crate::types::{JobHandle, JobSpec, JobStatus};

pub use fit::{
    multi_agent_fit, read_metrics, rl_fit, run_inference, Convergence, EpisodeReport, EvaluationReport, MetricRecord,
    MultiAgentReport, TrainLoopConfig, TrainingReport,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("scheduler unreachable: {0}")]
    SchedulerUnreachable(String),
    #[error("task server unreachable: {0}")]
    TaskUnreachable(String),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("job {0} failed ({1})")]
    JobFailed(String, JobStatus),
    #[error("inference jobs need checkpoint_init")]
    CheckpointRequired,
    #[error("round aborted: {0}")]
    RoundAborted(String),
    #[error("{0}")]
    InvalidSpec(String),
    #[error("interrupted")]
    Interrupted,
    #[error("timed out: {0}")]
    Timeout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::SchedulerUnreachable(_) => "SchedulerUnreachable",
            ClientError::TaskUnreachable(_) => "TaskUnreachable",
            ClientError::Remote { code, .. } => code,
            ClientError::JobFailed(..) => "JobFailed",
            ClientError::CheckpointRequired => "CheckpointRequired",
            ClientError::RoundAborted(_) => "RoundAborted",
            ClientError::InvalidSpec(_) => "InvalidSpec",
            ClientError::Interrupted => "Interrupted",
            ClientError::Timeout(_) => "Timeout",
            ClientError::Io(_) => "IOError",
        }
    }

    fn from_rpc(e: RpcError, unreachable: fn(String) -> ClientError) -> ClientError {
        match e {
            RpcError::Remote { code, message } if code == "RoundAborted" => ClientError::RoundAborted(message),
            RpcError::Remote { code, message } => ClientError::Remote { code, message },
            other => unreachable(other.to_string()),
        }
    }
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);
static HANDLER: Once = Once::new();

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Routes SIGINT/SIGTERM to a flag the driver loops poll, so guards get to
/// run their cleanup instead of the process dying mid-step.
pub fn install_interrupt_handler() {
    HANDLER.call_once(|| unsafe {
        libc::signal(libc::SIGINT, on_sigint as extern "C" fn(libc::c_int) as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_sigint as extern "C" fn(libc::c_int) as libc::sighandler_t);
    });
}

pub fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}

/// Clears a delivered interrupt; for tests that reuse a process.
pub fn reset_interrupt() {
    INTERRUPTED.store(false, Ordering::SeqCst);
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

pub struct SchedulerClient {
    rpc: RpcClient,
}

impl SchedulerClient {
    pub fn connect(addr: &str) -> Result<Self, ClientError> {
        RpcClient::connect(addr)
            .map(|rpc| SchedulerClient { rpc })
            .map_err(|e| ClientError::SchedulerUnreachable(format!("{addr}: {e}")))
    }

    fn call<T: DeserializeOwned>(&self, kind: MessageKind, payload: Value) -> Result<T, ClientError> {
        let reply = self.rpc.call(kind, obj(payload)).map_err(|e| ClientError::from_rpc(e, ClientError::SchedulerUnreachable))?;
        serde_json::from_value(Value::Object(reply)).map_err(|e| ClientError::SchedulerUnreachable(format!("bad reply: {e}")))
    }

    pub fn submit(&self, spec: &JobSpec) -> Result<JobHandle, ClientError> {
        self.call(MessageKind::SubmitJob, json!({ "spec": spec }))
    }

    pub fn status(&self, job_id: &str) -> Result<JobHandle, ClientError> {
        self.call(MessageKind::JobStatus, json!({ "job_id": job_id }))
    }

    pub fn terminate(&self, job_id: &str) -> Result<JobHandle, ClientError> {
        self.call(MessageKind::TerminateJob, json!({ "job_id": job_id }))
    }

    pub fn heartbeat(&self, job_id: &str) -> Result<(), ClientError> {
        let _: Value = self.call(MessageKind::Heartbeat, json!({ "job_id": job_id, "source": "client" }))?;
        Ok(())
    }

    /// `{capacity, free, queued}` of the scheduler's slot pool.
    pub fn info(&self) -> Result<Value, ClientError> {
        self.call(MessageKind::SchedulerInfo, json!({}))
    }

    /// Polls until the job leaves QUEUED. Fails if it ends without running.
    pub fn wait_running(&self, job_id: &str, timeout: Duration) -> Result<JobHandle, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let h = self.status(job_id)?;
            match h.status {
                JobStatus::Running => return Ok(h),
                JobStatus::Queued => {}
                other => return Err(ClientError::JobFailed(job_id.to_string(), other)),
            }
            if interrupted() {
                return Err(ClientError::Interrupted);
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(format!("{job_id} still queued")));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }
}

struct Beat {
    stop: Mutex<bool>,
    cv: Condvar,
}

/// Terminates its job exactly once: on [`LifecycleGuard::release`], on drop
/// after an error, or after an interrupt unwinds the driver loop. While held
/// it sends client heartbeats so a crashed client's job gets reaped.
pub struct LifecycleGuard {
    scheduler: Arc<SchedulerClient>,
    job_id: String,
    released: AtomicBool,
    beat: Arc<Beat>,
}

impl LifecycleGuard {
    pub fn new(scheduler: Arc<SchedulerClient>, job_id: &str, heartbeat_interval: Option<Duration>) -> Self {
        let beat = Arc::new(Beat { stop: Mutex::new(false), cv: Condvar::new() });
        if let Some(interval) = heartbeat_interval {
            let (sched, id, beat) = (scheduler.clone(), job_id.to_string(), beat.clone());
            thread::spawn(move || {
                let mut stop = beat.stop.lock().unwrap_or_else(|p| p.into_inner());
                while !*stop {
                    drop(stop);
                    if let Err(e) = sched.heartbeat(&id) {
                        log::warn!("client heartbeat for {id}: {e}");
                    }
                    stop = beat.stop.lock().unwrap_or_else(|p| p.into_inner());
                    stop = beat.cv.wait_timeout(stop, interval).unwrap_or_else(|p| p.into_inner()).0;
                }
            });
        }
        LifecycleGuard { scheduler, job_id: job_id.to_string(), released: AtomicBool::new(false), beat }
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn is_released(&self) -> bool {
        self.released.load(Ordering::SeqCst)
    }

    /// Sends terminate_job unless already sent. Returns the final handle when it was sent now.
    pub fn release(&self) -> Option<Result<JobHandle, ClientError>> {
        if self.released.swap(true, Ordering::SeqCst) {
            return None;
        }
        *self.beat.stop.lock().unwrap_or_else(|p| p.into_inner()) = true;
        self.beat.cv.notify_all();
        let out = self.scheduler.terminate(&self.job_id);
        if let Err(e) = &out {
            log::warn!("terminate {}: {e}", self.job_id);
        }
        Some(out)
    }
}

impl Drop for LifecycleGuard {
    fn drop(&mut self) {
        self.release();
    }
}

/// Typed connection to one task server.
pub struct TaskClient {
    rpc: RpcClient,
}

impl TaskClient {
    pub fn connect(addr: &str) -> Result<Self, ClientError> {
        RpcClient::connect(addr)
            .map(|rpc| TaskClient { rpc })
            .map_err(|e| ClientError::TaskUnreachable(format!("{addr}: {e}")))
    }

    pub fn call<T: DeserializeOwned>(&self, kind: MessageKind, payload: impl Serialize) -> Result<T, ClientError> {
        let payload = serde_json::to_value(payload).map_err(|e| ClientError::InvalidSpec(e.to_string()))?;
        let reply = self.rpc.call(kind, obj(payload)).map_err(|e| ClientError::from_rpc(e, ClientError::TaskUnreachable))?;
        serde_json::from_value(Value::Object(reply)).map_err(|e| ClientError::TaskUnreachable(format!("bad reply: {e}")))
    }

    pub fn train_step(&self) -> Result<TrainStepReport, ClientError> {
        self.call(MessageKind::TrainStep, json!({}))
    }

    pub fn validate(&self, episodes: usize) -> Result<ValidationReport, ClientError> {
        self.call(MessageKind::Validate, json!({ "num_episodes": episodes }))
    }

    pub fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, ClientError> {
        let reply: Value = self.call(MessageKind::Generate, json!({ "prompt": prompt, "max_tokens": max_tokens }))?;
        Ok(reply["text"].as_str().unwrap_or_default().to_string())
    }

    pub fn save_checkpoint(&self) -> Result<u64, ClientError> {
        let reply: Value = self.call(MessageKind::SaveCheckpoint, json!({}))?;
        reply["version"].as_u64().ok_or_else(|| ClientError::TaskUnreachable("bad checkpoint reply".into()))
    }

    pub fn load_checkpoint(&self, version: Option<u64>) -> Result<u64, ClientError> {
        let v = version.map_or(json!("LATEST"), |v| json!(v));
        let reply: Value = self.call(MessageKind::LoadCheckpoint, json!({ "version": v }))?;
        reply["version"].as_u64().ok_or_else(|| ClientError::TaskUnreachable("bad checkpoint reply".into()))
    }
}

/// Reads a JobSpec JSON file.
pub fn read_spec(path: &Path) -> Result<JobSpec, ClientError> {
    let text = std::fs::read_to_string(path)?;
    let spec: JobSpec =
        serde_json::from_str(&text).map_err(|e| ClientError::InvalidSpec(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(ClientError::InvalidSpec)?;
    Ok(spec)
}
