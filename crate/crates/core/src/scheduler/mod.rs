//! Control plane: slot pool, FIFO admission, task-server launch, heartbeat
//! reaping and teardown.
//!
//! Every state change goes through one event-loop thread. Launches and
//! terminations run on worker threads and post their outcome back as events.

pub mod process;
pub mod service;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::task_server::TaskSettings;
use crate::types::{now_millis, JobHandle, JobSpec, JobStatus};
use process::{LaunchCommand, ProcControl};

pub use service::{start_scheduler, SchedulerServer, SchedulerService};

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub capacity: BTreeMap<String, u32>,
    /// Executable launched as `<exe> task-server ...`.
    pub task_exe: PathBuf,
    /// Per-job working directories (spec file, default checkpoint store).
    pub work_dir: PathBuf,
    /// Scheduler address handed to task servers for heartbeats and metrics.
    pub advertise: Option<String>,
    pub heartbeat_interval: Duration,
    pub missed_heartbeats: u32,
    pub grace: Duration,
    pub retention: Duration,
    pub ready_timeout: Duration,
    /// Reap jobs whose task server stops heartbeating.
    pub require_server_heartbeat: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            capacity: BTreeMap::from([("gpu".to_string(), 8)]),
            task_exe: std::env::current_exe().unwrap_or_else(|_| PathBuf::from("rlaas")),
            work_dir: std::env::temp_dir().join("rlaas-jobs"),
            advertise: None,
            heartbeat_interval: Duration::from_secs(5),
            missed_heartbeats: 3,
            grace: Duration::from_secs(5),
            retention: Duration::from_secs(600),
            ready_timeout: Duration::from_secs(60),
            require_server_heartbeat: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("request exceeds total capacity: {0}")]
    Oversubscribed(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("scheduler is shut down")]
    Shutdown,
}

impl SchedError {
    pub fn code(&self) -> &'static str {
        match self {
            SchedError::InvalidSpec(_) => "InvalidSpec",
            SchedError::Oversubscribed(_) => "Oversubscribed",
            SchedError::UnknownJob(_) => "UnknownJob",
            SchedError::Shutdown => "SchedulerUnreachable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeartbeatSource {
    #[default]
    Server,
    Client,
}

/// Consistent view of the whole scheduler for probes and tests.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub capacity: BTreeMap<String, u32>,
    pub jobs: Vec<JobHandle>,
    pub queue: Vec<String>,
    /// Jobs in launch order.
    pub launch_order: Vec<String>,
}

impl Snapshot {
    /// Resources whose allocation exceeds capacity or whose slots are double-held.
    pub fn capacity_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (res, cap) in &self.capacity {
            let mut held: Vec<u32> = self.jobs.iter().filter_map(|j| j.allocated.get(res)).flatten().copied().collect();
            let n = held.len();
            held.sort_unstable();
            held.dedup();
            if n > *cap as usize || held.len() != n || held.iter().any(|s| s >= cap) {
                bad.push(res.clone());
            }
        }
        bad
    }

    pub fn job(&self, id: &str) -> Option<&JobHandle> {
        self.jobs.iter().find(|j| j.job_id == id)
    }
}

type Reply<T> = Sender<Result<T, SchedError>>;

enum Event {
    Submit(JobSpec, Reply<JobHandle>),
    Status(String, Reply<JobHandle>),
    Terminate(String, Reply<JobHandle>),
    Heartbeat(String, HeartbeatSource, Sender<bool>),
    Metric(String, Value),
    Snapshot(Sender<Snapshot>),
    Kill(String),
    Launched { job_id: String, endpoint: String, control: Arc<ProcControl> },
    LaunchFailed { job_id: String, error: String },
    Exited { job_id: String, code: Option<i32> },
    TerminateDone { job_id: String, forced: bool },
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StopReason {
    User,
    Reap,
}

struct Job {
    handle: JobHandle,
    spec: JobSpec,
    launching: bool,
    control: Option<Arc<ProcControl>>,
    exited: bool,
    stop: Option<StopReason>,
    last_server_beat: Instant,
    last_client_beat: Option<Instant>,
    finished_at: Option<Instant>,
    submit_waiter: Option<Reply<JobHandle>>,
    terminate_waiters: Vec<Reply<JobHandle>>,
}

struct Loop {
    config: SchedulerConfig,
    tx: Sender<Event>,
    jobs: HashMap<String, Job>,
    queue: VecDeque<String>,
    free: BTreeMap<String, Vec<u32>>,
    next_id: u64,
    launch_order: Vec<String>,
}

pub struct Scheduler {
    tx: Sender<Event>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Scheduler {
    pub fn start(config: SchedulerConfig) -> Scheduler {
        let (tx, rx) = mpsc::channel();
        let free = config.capacity.iter().map(|(k, &n)| (k.clone(), (0..n).collect())).collect();
        let mut lp = Loop {
            config,
            tx: tx.clone(),
            jobs: HashMap::new(),
            queue: VecDeque::new(),
            free,
            next_id: 1,
            launch_order: Vec::new(),
        };
        let thread = thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || lp.run(rx))
            .expect("spawn scheduler loop");
        Scheduler { tx, thread: Mutex::new(Some(thread)) }
    }

    fn ask<T>(&self, make: impl FnOnce(Sender<T>) -> Event) -> Result<T, SchedError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(make(tx)).map_err(|_| SchedError::Shutdown)?;
        rx.recv().map_err(|_| SchedError::Shutdown)
    }

    pub fn submit(&self, spec: JobSpec) -> Result<JobHandle, SchedError> {
        self.ask(|tx| Event::Submit(spec, tx))?
    }

    pub fn status(&self, job_id: &str) -> Result<JobHandle, SchedError> {
        self.ask(|tx| Event::Status(job_id.to_string(), tx))?
    }

    /// Stops a job and waits until it is final. Idempotent on final jobs.
    pub fn terminate(&self, job_id: &str) -> Result<JobHandle, SchedError> {
        self.ask(|tx| Event::Terminate(job_id.to_string(), tx))?
    }

    /// Returns false when the job is unknown.
    pub fn heartbeat(&self, job_id: &str, source: HeartbeatSource) -> bool {
        self.ask(|tx| Event::Heartbeat(job_id.to_string(), source, tx)).unwrap_or(false)
    }

    pub fn stream_metric(&self, job_id: &str, metric: Value) {
        let _ = self.tx.send(Event::Metric(job_id.to_string(), metric));
    }

    pub fn snapshot(&self) -> Result<Snapshot, SchedError> {
        self.ask(Event::Snapshot)
    }

    /// Fault injection: kills a job's task server without telling anyone.
    pub fn kill_process(&self, job_id: &str) {
        let _ = self.tx.send(Event::Kill(job_id.to_string()));
    }

    /// Terminates every live job and stops the loop.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Event::Shutdown);
        if let Some(t) = self.thread.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let _ = t.join();
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Loop {
    fn run(&mut self, rx: Receiver<Event>) {
        let tick = (self.config.heartbeat_interval / 4).clamp(Duration::from_millis(10), Duration::from_millis(250));
        loop {
            match rx.recv_timeout(tick) {
                Ok(Event::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(ev) => self.on_event(ev),
                Err(RecvTimeoutError::Timeout) => {}
            }
            self.check_heartbeats();
            self.expire_records();
        }
        self.teardown();
    }

    fn teardown(&mut self) {
        for job in self.jobs.values() {
            if let Some(c) = &job.control {
                c.request_kill();
            }
        }
        for job in self.jobs.values() {
            if let Some(c) = &job.control {
                c.wait_exit(Duration::from_secs(5));
            }
        }
    }

    fn on_event(&mut self, ev: Event) {
        match ev {
            Event::Submit(spec, reply) => self.submit(spec, reply),
            Event::Status(id, reply) => {
                let _ = reply.send(self.jobs.get(&id).map(|j| j.handle.clone()).ok_or(SchedError::UnknownJob(id)));
            }
            Event::Terminate(id, reply) => self.terminate(id, reply),
            Event::Heartbeat(id, source, reply) => {
                let known = match self.jobs.get_mut(&id) {
                    Some(job) if !job.handle.status.is_final() => {
                        let now = Instant::now();
                        match source {
                            HeartbeatSource::Server => job.last_server_beat = now,
                            HeartbeatSource::Client => job.last_client_beat = Some(now),
                        }
                        job.handle.last_heartbeat = now_millis();
                        true
                    }
                    Some(_) => true,
                    None => {
                        log::warn!("heartbeat from unknown job {id}");
                        false
                    }
                };
                let _ = reply.send(known);
            }
            Event::Metric(id, metric) => match self.jobs.get_mut(&id) {
                Some(job) => {
                    let kind = metric.get("kind").and_then(Value::as_str).unwrap_or("metric").to_string();
                    let slot = job.handle.metrics.get_or_insert_with(|| Value::Object(Default::default()));
                    if let Value::Object(m) = slot {
                        m.insert(kind, metric);
                    }
                }
                None => log::warn!("metric from unknown job {id}"),
            },
            Event::Snapshot(reply) => {
                let mut jobs: Vec<JobHandle> = self.jobs.values().map(|j| j.handle.clone()).collect();
                jobs.sort_by(|a, b| a.job_id.cmp(&b.job_id));
                let _ = reply.send(Snapshot {
                    capacity: self.config.capacity.clone(),
                    jobs,
                    queue: self.queue.iter().cloned().collect(),
                    launch_order: self.launch_order.clone(),
                });
            }
            Event::Kill(id) => {
                if let Some(c) = self.jobs.get(&id).and_then(|j| j.control.as_ref()) {
                    c.request_kill();
                }
            }
            Event::Launched { job_id, endpoint, control } => self.launched(job_id, endpoint, control),
            Event::LaunchFailed { job_id, error } => {
                log::error!("launch of {job_id} failed: {error}");
                self.finalize(&job_id, JobStatus::Failed);
                if let Some(w) = self.jobs.get_mut(&job_id).and_then(|j| j.submit_waiter.take()) {
                    let handle = self.jobs[&job_id].handle.clone();
                    let _ = w.send(Ok(handle));
                }
            }
            Event::Exited { job_id, code } => {
                let Some(job) = self.jobs.get_mut(&job_id) else { return };
                job.exited = true;
                if job.handle.status == JobStatus::Running && job.stop.is_none() {
                    log::error!("task server of {job_id} exited unexpectedly ({code:?})");
                    self.finalize(&job_id, JobStatus::Failed);
                }
            }
            Event::TerminateDone { job_id, forced } => {
                let reason = self.jobs.get(&job_id).and_then(|j| j.stop);
                let status = if forced || reason == Some(StopReason::Reap) { JobStatus::Reaped } else { JobStatus::Finished };
                self.finalize(&job_id, status);
            }
            Event::Shutdown => {}
        }
    }

    fn submit(&mut self, spec: JobSpec, reply: Reply<JobHandle>) {
        if let Err(e) = self.check_spec(&spec) {
            let _ = reply.send(Err(e));
            return;
        }
        let job_id = format!("job-{:04}", self.next_id);
        self.next_id += 1;
        let handle = JobHandle {
            job_id: job_id.clone(),
            status: JobStatus::Queued,
            endpoints: Vec::new(),
            allocated: BTreeMap::new(),
            last_heartbeat: 0,
            metrics: None,
        };
        self.jobs.insert(
            job_id.clone(),
            Job {
                handle,
                spec,
                launching: false,
                control: None,
                exited: false,
                stop: None,
                last_server_beat: Instant::now(),
                last_client_beat: None,
                finished_at: None,
                submit_waiter: Some(reply),
                terminate_waiters: Vec::new(),
            },
        );
        self.queue.push_back(job_id.clone());
        self.admit();
        // still queued: answer now; admitted jobs answer once launched
        if let Some(job) = self.jobs.get_mut(&job_id) {
            if !job.launching {
                if let Some(w) = job.submit_waiter.take() {
                    let _ = w.send(Ok(job.handle.clone()));
                }
            }
        }
    }

    fn check_spec(&self, spec: &JobSpec) -> Result<(), SchedError> {
        spec.validate().map_err(SchedError::InvalidSpec)?;
        TaskSettings::from_spec("check", spec).map_err(SchedError::InvalidSpec)?;
        for (res, &n) in &spec.resources {
            match self.config.capacity.get(res) {
                None => return Err(SchedError::InvalidSpec(format!("unknown resource {res:?}"))),
                Some(&cap) if n > cap => {
                    return Err(SchedError::Oversubscribed(format!("{res}: requested {n}, capacity {cap}")));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn fits(&self, spec: &JobSpec) -> bool {
        spec.resources.iter().all(|(res, &n)| self.free.get(res).is_some_and(|f| f.len() >= n as usize))
    }

    /// Strict FIFO: launch from the head while the head fits.
    fn admit(&mut self) {
        while let Some(head) = self.queue.front() {
            let spec = &self.jobs[head].spec;
            if !self.fits(spec) {
                break;
            }
            let job_id = self.queue.pop_front().expect("head");
            let job = self.jobs.get_mut(&job_id).expect("queued job exists");
            let mut allocated = BTreeMap::new();
            for (res, &n) in &job.spec.resources {
                let free = self.free.get_mut(res).expect("checked resource");
                let slots: Vec<u32> = free.drain(..n as usize).collect();
                allocated.insert(res.clone(), slots);
            }
            job.handle.allocated = allocated;
            job.launching = true;
            self.launch_order.push(job_id.clone());
            let cmd = self.launch_command(&job_id);
            launch(job_id, cmd, self.config.ready_timeout, self.tx.clone());
        }
    }

    fn launch_command(&self, job_id: &str) -> Result<LaunchCommand, String> {
        let job = &self.jobs[job_id];
        let dir = self.config.work_dir.join(job_id);
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let spec_path = dir.join("spec.json");
        let text = serde_json::to_string_pretty(&job.spec).map_err(|e| e.to_string())?;
        std::fs::write(&spec_path, text).map_err(|e| format!("{}: {e}", spec_path.display()))?;
        let store = match job.spec.hyperparameters.get("checkpoint_store").and_then(Value::as_str) {
            Some(s) => PathBuf::from(s),
            None => dir.join("ckpt"),
        };
        let mut args = vec![
            "task-server".to_string(),
            "--bind".into(),
            "127.0.0.1:0".into(),
            "--job-id".into(),
            job_id.to_string(),
            "--job-spec".into(),
            spec_path.display().to_string(),
            "--ckpt-store".into(),
            store.display().to_string(),
            "--heartbeat-interval-ms".into(),
            self.config.heartbeat_interval.as_millis().to_string(),
        ];
        if let Some(addr) = &self.config.advertise {
            args.push("--scheduler".into());
            args.push(addr.clone());
        }
        if job.spec.hyperparameters.get("test_hang_on_terminate").and_then(Value::as_bool) == Some(true) {
            args.push("--hang-on-terminate".into());
        }
        let slot_ids = job
            .handle
            .allocated
            .values()
            .flatten()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        Ok(LaunchCommand {
            exe: self.config.task_exe.clone(),
            args,
            env: vec![("SLOT_IDS".into(), slot_ids)],
        })
    }

    fn launched(&mut self, job_id: String, endpoint: String, control: Arc<ProcControl>) {
        let Some(job) = self.jobs.get_mut(&job_id) else {
            control.request_kill();
            return;
        };
        job.launching = false;
        job.control = Some(control);
        job.handle.endpoints = vec![endpoint];
        job.handle.status = JobStatus::Running;
        job.last_server_beat = Instant::now();
        job.handle.last_heartbeat = now_millis();
        let exited = job.exited;
        let cancelled = job.stop.is_some();
        if let Some(w) = job.submit_waiter.take() {
            let _ = w.send(Ok(job.handle.clone()));
        }
        log::info!("{job_id} running at {}", job.handle.endpoints[0]);
        if exited {
            self.finalize(&job_id, JobStatus::Failed);
        } else if cancelled {
            let reason = job.stop.unwrap_or(StopReason::User);
            job.stop = None;
            self.begin_stop(&job_id, reason);
        }
    }

    fn terminate(&mut self, job_id: String, reply: Reply<JobHandle>) {
        let Some(job) = self.jobs.get_mut(&job_id) else {
            let _ = reply.send(Err(SchedError::UnknownJob(job_id)));
            return;
        };
        if job.handle.status.is_final() {
            let _ = reply.send(Ok(job.handle.clone()));
            return;
        }
        job.terminate_waiters.push(reply);
        match job.handle.status {
            JobStatus::Queued if !job.launching => {
                self.queue.retain(|q| q != &job_id);
                self.finalize(&job_id, JobStatus::Finished);
            }
            // launching: stop as soon as it reports ready
            JobStatus::Queued => {
                job.stop.get_or_insert(StopReason::User);
            }
            JobStatus::Running => self.begin_stop(&job_id, StopReason::User),
            _ => {}
        }
    }

    fn begin_stop(&mut self, job_id: &str, reason: StopReason) {
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        if job.stop.is_some() || job.handle.status != JobStatus::Running {
            return;
        }
        job.stop = Some(reason);
        job.handle.status = JobStatus::Terminating;
        let endpoint = job.handle.endpoints.first().cloned();
        let control = job.control.clone().expect("running job has a process");
        let grace = self.config.grace;
        let tx = self.tx.clone();
        let id = job_id.to_string();
        thread::spawn(move || {
            let forced = process::terminate(endpoint.as_deref(), &id, &control, grace);
            let _ = tx.send(Event::TerminateDone { job_id: id, forced });
        });
    }

    fn check_heartbeats(&mut self) {
        let limit = self.config.heartbeat_interval * self.config.missed_heartbeats;
        let now = Instant::now();
        let mut dead = Vec::new();
        let mut abandoned = Vec::new();
        for (id, job) in self.jobs.iter_mut() {
            let client_dead = job.last_client_beat.is_some_and(|t| now - t > limit);
            match job.handle.status {
                JobStatus::Running if job.stop.is_none() => {
                    let server_dead = self.config.require_server_heartbeat && now - job.last_server_beat > limit;
                    if server_dead || client_dead {
                        log::warn!("{id} missed {} heartbeats; reaping", self.config.missed_heartbeats);
                        dead.push(id.clone());
                    }
                }
                // a dead client's waiting job must not hold the head of the queue
                JobStatus::Queued if client_dead && !job.launching => abandoned.push(id.clone()),
                JobStatus::Queued if client_dead => {
                    job.stop.get_or_insert(StopReason::Reap);
                }
                _ => {}
            }
        }
        for id in dead {
            self.begin_stop(&id, StopReason::Reap);
        }
        for id in abandoned {
            log::warn!("{id} lost its client while queued; reaping");
            self.queue.retain(|q| q != &id);
            self.finalize(&id, JobStatus::Reaped);
        }
    }

    fn expire_records(&mut self) {
        let retention = self.config.retention;
        self.jobs.retain(|_, j| j.finished_at.is_none_or(|t| t.elapsed() < retention));
    }

    /// Moves a job to a final status, frees its slots and admits waiters.
    fn finalize(&mut self, job_id: &str, status: JobStatus) {
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        if job.handle.status.is_final() {
            return;
        }
        debug_assert!(
            job.handle.status.can_transition_to(status) || job.handle.status == JobStatus::Running,
            "{} -> {status}",
            job.handle.status
        );
        if let Some(c) = &job.control {
            if !c.has_exited() {
                c.request_kill();
                c.wait_exit(Duration::from_secs(5));
            }
        }
        for (res, slots) in std::mem::take(&mut job.handle.allocated) {
            self.free.entry(res).or_default().extend(slots);
        }
        for f in self.free.values_mut() {
            f.sort_unstable();
        }
        job.handle.status = status;
        job.launching = false;
        job.finished_at = Some(Instant::now());
        log::info!("{job_id} is {status}");
        for w in job.terminate_waiters.drain(..) {
            let _ = w.send(Ok(job.handle.clone()));
        }
        self.admit();
    }
}

/// Spawns on the calling (loop) thread, then waits for readiness off it.
fn launch(job_id: String, cmd: Result<LaunchCommand, String>, ready_timeout: Duration, tx: Sender<Event>) {
    let cmd = match cmd {
        Ok(c) => c,
        Err(error) => {
            let _ = tx.send(Event::LaunchFailed { job_id, error });
            return;
        }
    };
    let exit_tx = tx.clone();
    let exit_id = job_id.clone();
    let spawned = process::spawn(&cmd, move |code| {
        let _ = exit_tx.send(Event::Exited { job_id: exit_id, code });
    });
    let (control, lines) = match spawned {
        Ok(s) => s,
        Err(e) => {
            let _ = tx.send(Event::LaunchFailed { job_id, error: format!("spawn {}: {e}", cmd.exe.display()) });
            return;
        }
    };
    thread::spawn(move || match process::await_ready(&lines, ready_timeout) {
        Ok(endpoint) => {
            let _ = tx.send(Event::Launched { job_id, endpoint, control });
            // keep draining stdout so the child never blocks on a full pipe
            for _ in lines {}
        }
        Err(error) => {
            control.request_kill();
            control.wait_exit(Duration::from_secs(5));
            let _ = tx.send(Event::LaunchFailed { job_id, error });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::JobType;

    fn idle() -> Scheduler {
        // a missing executable: every launch fails, which is enough for admission logic
        Scheduler::start(SchedulerConfig {
            task_exe: PathBuf::from("/nonexistent/rlaas"),
            work_dir: tempfile::tempdir().unwrap().keep(),
            ..SchedulerConfig::default()
        })
    }

    #[test]
    fn spec_errors() {
        let s = idle();
        let over = JobSpec::new(JobType::Rl).with_resource("gpu", 16);
        assert_eq!(s.submit(over).unwrap_err().code(), "Oversubscribed");
        let unknown = JobSpec::new(JobType::Rl).with_resource("tpu", 1);
        assert_eq!(s.submit(unknown).unwrap_err().code(), "InvalidSpec");
        let zero = JobSpec::new(JobType::Rl).with_resource("gpu", 0);
        assert_eq!(s.submit(zero).unwrap_err().code(), "InvalidSpec");
        assert_eq!(s.status("job-9999").unwrap_err().code(), "UnknownJob");
        assert_eq!(s.terminate("job-9999").unwrap_err().code(), "UnknownJob");
        assert!(!s.heartbeat("job-9999", HeartbeatSource::Client));
    }

    #[test]
    fn failed_launch_frees_slots() {
        let s = idle();
        let h = s.submit(JobSpec::new(JobType::Rl).with_resource("gpu", 8)).unwrap();
        assert_eq!(h.status, JobStatus::Failed);
        assert!(h.allocated.is_empty());
        let snap = s.snapshot().unwrap();
        assert!(snap.capacity_violations().is_empty());
        assert_eq!(s.terminate(&h.job_id).unwrap().status, JobStatus::Failed);
    }

    #[test]
    fn probe_detects_double_allocation() {
        let handle = |id: &str, slots: Vec<u32>| JobHandle {
            job_id: id.into(),
            status: JobStatus::Running,
            endpoints: vec![],
            allocated: BTreeMap::from([("gpu".to_string(), slots)]),
            last_heartbeat: 0,
            metrics: None,
        };
        let mut snap = Snapshot {
            capacity: BTreeMap::from([("gpu".to_string(), 4)]),
            jobs: vec![handle("a", vec![0, 1]), handle("b", vec![2, 3])],
            queue: vec![],
            launch_order: vec![],
        };
        assert!(snap.capacity_violations().is_empty());
        snap.jobs[1].allocated.insert("gpu".into(), vec![1, 2]);
        assert_eq!(snap.capacity_violations(), vec!["gpu".to_string()]);
    }
}
