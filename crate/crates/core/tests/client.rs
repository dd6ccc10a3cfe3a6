use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Map, Value};

use rlaas::client::{
    install_interrupt_handler, read_metrics, reset_interrupt, rl_fit, run_inference, ClientError, TrainLoopConfig,
};
use rlaas::protocol::MessageKind;
use rlaas::rpc::{bind, serve, ServerHandle, ServiceError};
use rlaas::scheduler::{start_scheduler, SchedulerConfig, SchedulerServer};
use rlaas::types::{CheckpointRef, JobSpec, JobStatus, JobType};

fn handle(endpoint: &str, status: &str) -> Value {
    json!({"job_id": "job-1", "status": status, "endpoints": [endpoint], "allocated": {}, "last_heartbeat": 0})
}

/// Scheduler double that counts terminate_job calls.
fn fake_scheduler(task_addr: String, terminates: Arc<AtomicUsize>) -> ServerHandle {
    let svc = move |kind: MessageKind, _: Map<String, Value>| -> Result<Value, ServiceError> {
        match kind {
            MessageKind::SubmitJob | MessageKind::JobStatus => Ok(handle(&task_addr, "RUNNING")),
            MessageKind::TerminateJob => {
                terminates.fetch_add(1, Ordering::SeqCst);
                Ok(handle(&task_addr, "FINISHED"))
            }
            MessageKind::Heartbeat => Ok(json!({"known": true})),
            _ => Err(ServiceError::new("UnsupportedKind", "")),
        }
    };
    serve(bind("127.0.0.1:0").unwrap(), Arc::new(svc)).unwrap()
}

#[derive(Clone, Copy)]
enum Fault {
    None,
    ErrorAt(u64),
    InterruptAt(u64),
}

/// Task-server double with canned reports.
fn fake_task(fault: Fault) -> ServerHandle {
    let steps = Arc::new(AtomicUsize::new(0));
    let svc = move |kind: MessageKind, _: Map<String, Value>| -> Result<Value, ServiceError> {
        match kind {
            MessageKind::TrainStep => {
                let step = steps.fetch_add(1, Ordering::SeqCst) as u64 + 1;
                match fault {
                    Fault::ErrorAt(n) if step == n => return Err(ServiceError::new("EmptyGroup", "boom")),
                    Fault::InterruptAt(n) if step == n => unsafe {
                        libc::raise(libc::SIGINT);
                    },
                    _ => {}
                }
                Ok(json!({"step": step, "version": step, "mean_return": 0.5, "std_return": 0.1, "token_count": 10,
                          "episodes": 4, "failed_episodes": 0, "wallclock_ms": 1}))
            }
            MessageKind::Validate => Ok(json!({"step": steps.load(Ordering::SeqCst), "mean": 0.5, "std": 0.0,
                                               "win_rate": 0.5, "episodes": 4, "tokens": 8, "wallclock_ms": 1})),
            _ => Err(ServiceError::new("UnsupportedKind", "")),
        }
    };
    serve(bind("127.0.0.1:0").unwrap(), Arc::new(svc)).unwrap()
}

fn loop_cfg(steps: u64) -> TrainLoopConfig {
    TrainLoopConfig {
        total_steps: steps,
        validate_every: 1,
        validation_episodes: 4,
        convergence: None,
        heartbeat_interval: None,
        ..TrainLoopConfig::default()
    }
}

fn count_terminates(fault: Fault, steps: u64) -> (usize, Result<(), ClientError>) {
    let task = fake_task(fault);
    let terminates = Arc::new(AtomicUsize::new(0));
    let sched = fake_scheduler(task.addr_string(), terminates.clone());
    let out = rl_fit(&sched.addr_string(), &JobSpec::new(JobType::Rl), &loop_cfg(steps)).map(|_| ());
    (terminates.load(Ordering::SeqCst), out)
}

#[test]
fn guard_sends_exactly_one_terminate() {
    install_interrupt_handler();
    let (n, out) = count_terminates(Fault::None, 5);
    assert!(out.is_ok());
    assert_eq!(n, 1, "normal exit");

    let (n, out) = count_terminates(Fault::ErrorAt(3), 5);
    assert_eq!(out.unwrap_err().code(), "EmptyGroup");
    assert_eq!(n, 1, "raised error");

    let (n, out) = count_terminates(Fault::InterruptAt(2), 50);
    assert_eq!(out.unwrap_err().code(), "Interrupted");
    assert_eq!(n, 1, "interrupt");
    reset_interrupt();

    let (n, out) = count_terminates(Fault::None, 0);
    assert!(out.is_ok());
    assert_eq!(n, 1, "zero steps");
}

fn real_scheduler() -> SchedulerServer {
    let config = SchedulerConfig {
        task_exe: PathBuf::from(env!("CARGO_BIN_EXE_rlaas")),
        work_dir: tempfile::tempdir().unwrap().keep(),
        heartbeat_interval: Duration::from_millis(500),
        grace: Duration::from_secs(2),
        ..SchedulerConfig::default()
    };
    start_scheduler(config, "127.0.0.1:0").unwrap()
}

#[test]
fn fit_then_infer_from_checkpoint() {
    let sched = real_scheduler();
    let addr = sched.addr();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let metrics = dir.path().join("m.jsonl");
    let spec = JobSpec::new(JobType::Rl)
        .with_resource("gpu", 2)
        .with_param("env_kind", "arith")
        .with_param("group_size", 4)
        .with_param("checkpoint_store", store.display().to_string());
    let cfg = TrainLoopConfig {
        total_steps: 4,
        validate_every: 2,
        validation_episodes: 10,
        checkpoint_every: 2,
        metrics_path: Some(metrics.clone()),
        heartbeat_interval: Some(Duration::from_millis(200)),
        ..TrainLoopConfig::default()
    };
    let report = rl_fit(&addr, &spec, &cfg).unwrap();
    assert_eq!(report.train.len(), 4);
    assert_eq!(report.validation.len(), 3);
    assert_eq!(report.checkpoints, vec![0, 1]);
    assert_eq!(report.final_status, Some(JobStatus::Finished));

    let recs = read_metrics(&metrics).unwrap();
    let shape: Vec<(u64, &str)> = recs.iter().map(|r| (r.step, r.kind.as_str())).collect();
    assert_eq!(shape, vec![(0, "val"), (1, "train"), (2, "train"), (2, "val"), (3, "train"), (4, "train"), (4, "val")]);

    // the scheduler relayed live metrics and kept them after the job ended
    let h = sched.scheduler.status(&report.job_id).unwrap();
    assert_eq!(h.metrics.as_ref().unwrap()["val"]["step"], 4);
    assert!(h.allocated.is_empty());

    let mut infer = JobSpec::new(JobType::Inference).with_resource("gpu", 1).with_param("env_kind", "arith");
    assert_eq!(run_inference(&addr, &infer, 1).unwrap_err().code(), "CheckpointRequired");
    infer.checkpoint_init = Some(CheckpointRef { store: store.display().to_string(), version: Some(0) });
    let eval = run_inference(&addr, &infer, 1).unwrap();
    assert_eq!(eval.episodes.len(), 1);
    assert!(eval.episodes[0].transcript.contains('+'));
    // the untouched initial checkpoint answers at chance
    let eval = run_inference(&addr, &infer, 50).unwrap();
    assert!(eval.mean < 0.05);
    let snap = sched.scheduler.snapshot().unwrap();
    assert!(snap.jobs.iter().all(|j| j.status.is_final() && j.allocated.is_empty()));
}
