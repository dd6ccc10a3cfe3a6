use std::io;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{HeartbeatSource, SchedError, Scheduler, SchedulerConfig};
use crate::protocol::MessageKind;
use crate::rpc::{bind, parse_payload, serve, to_payload, ServerHandle, ServiceError};
use crate::types::JobSpec;

impl From<SchedError> for ServiceError {
    fn from(e: SchedError) -> Self {
        ServiceError::new(e.code(), e.to_string())
    }
}

#[derive(Deserialize)]
struct SubmitRequest {
    spec: JobSpec,
}

#[derive(Deserialize)]
struct JobRequest {
    job_id: String,
}

#[derive(Deserialize)]
struct HeartbeatRequest {
    job_id: String,
    #[serde(default)]
    source: HeartbeatSource,
}

#[derive(Deserialize)]
struct MetricRequest {
    job_id: String,
    metric: Value,
}

pub struct SchedulerService {
    scheduler: Arc<Scheduler>,
}

impl SchedulerService {
    pub fn new(scheduler: Arc<Scheduler>) -> Self {
        SchedulerService { scheduler }
    }

    pub fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError> {
        let s = &self.scheduler;
        match kind {
            MessageKind::SubmitJob => {
                let req: SubmitRequest = parse_payload(payload).map_err(|e| ServiceError::new("InvalidSpec", e.message))?;
                to_payload(&s.submit(req.spec)?)
            }
            MessageKind::JobStatus => {
                let req: JobRequest = parse_payload(payload)?;
                to_payload(&s.status(&req.job_id)?)
            }
            MessageKind::TerminateJob => {
                let req: JobRequest = parse_payload(payload)?;
                to_payload(&s.terminate(&req.job_id)?)
            }
            MessageKind::Heartbeat => {
                let req: HeartbeatRequest = parse_payload(payload)?;
                Ok(json!({ "known": s.heartbeat(&req.job_id, req.source) }))
            }
            MessageKind::StreamMetric => {
                let req: MetricRequest = parse_payload(payload)?;
                s.stream_metric(&req.job_id, req.metric);
                Ok(json!({}))
            }
            MessageKind::SchedulerInfo => {
                let snap = s.snapshot()?;
                let free: std::collections::BTreeMap<&String, u32> = snap
                    .capacity
                    .iter()
                    .map(|(res, cap)| {
                        let used: usize = snap.jobs.iter().filter_map(|j| j.allocated.get(res)).map(Vec::len).sum();
                        (res, cap - used as u32)
                    })
                    .collect();
                Ok(json!({ "capacity": snap.capacity, "free": free, "queued": snap.queue.len() }))
            }
            other => Err(ServiceError::new("UnsupportedKind", format!("scheduler does not handle {other}"))),
        }
    }
}

pub struct SchedulerServer {
    pub handle: ServerHandle,
    pub scheduler: Arc<Scheduler>,
}

impl SchedulerServer {
    pub fn addr(&self) -> String {
        self.handle.addr_string()
    }
}

impl Drop for SchedulerServer {
    fn drop(&mut self) {
        self.handle.stop();
        self.scheduler.shutdown();
    }
}

/// Binds `bind`, starts the event loop advertising that address to task
/// servers, and serves the scheduler wire kinds.
pub fn start_scheduler(mut config: SchedulerConfig, bind_addr: &str) -> io::Result<SchedulerServer> {
    let listener = bind(bind_addr)?;
    let addr = listener.local_addr()?.to_string();
    config.advertise.get_or_insert(addr);
    let scheduler = Arc::new(Scheduler::start(config));
    let service = SchedulerService::new(scheduler.clone());
    let handle = serve(listener, Arc::new(move |kind, payload| service.handle(kind, payload)))?;
    log::info!("scheduler listening on {}", handle.addr_string());
    Ok(SchedulerServer { handle, scheduler })
}
