use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{interrupted, ClientError, LifecycleGuard, SchedulerClient, TaskClient};
use crate::coordinator::ProtocolSpec;
use crate::protocol::MessageKind;
use crate::task_server::{TrainStepReport, ValidationReport};
use crate::types::{now_millis, JobSpec, JobStatus, JobType};

/// Early stop when validation mean fails to improve by `threshold` for
/// `patience` consecutive validations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub threshold: f64,
    pub patience: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence { threshold: 0.01, patience: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLoopConfig {
    pub total_steps: u64,
    pub validate_every: u64,
    pub validation_episodes: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub convergence: Option<Convergence>,
    pub metrics_path: Option<PathBuf>,
    /// Client heartbeat period; `None` sends none.
    pub heartbeat_interval: Option<Duration>,
    pub launch_timeout: Duration,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            total_steps: 200,
            validate_every: 10,
            validation_episodes: 100,
            checkpoint_every: 0,
            convergence: Some(Convergence::default()),
            metrics_path: None,
            heartbeat_interval: Some(Duration::from_secs(5)),
            launch_timeout: Duration::from_secs(300),
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.validate_every == 0 || (self.total_steps > 0 && self.validate_every > self.total_steps) {
            return Err(ClientError::InvalidSpec("validate_every must be in 1..=total_steps".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub kind: String,
    pub mean: f64,
    pub std: f64,
    pub tokens: usize,
    pub wallclock_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<f64>,
}

impl MetricRecord {
    fn train(r: &TrainStepReport) -> Self {
        MetricRecord {
            step: r.step,
            kind: "train".into(),
            mean: r.mean_return,
            std: r.std_return,
            tokens: r.token_count,
            wallclock_ms: r.wallclock_ms,
            win_rate: None,
        }
    }

    fn val(r: &ValidationReport) -> Self {
        MetricRecord {
            step: r.step,
            kind: "val".into(),
            mean: r.mean,
            std: r.std,
            tokens: r.tokens,
            wallclock_ms: r.wallclock_ms,
            win_rate: Some(r.win_rate),
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, ClientError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ClientError::InvalidSpec(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

struct MetricLog {
    file: Option<File>,
}

impl MetricLog {
    fn open(path: Option<&Path>) -> Result<Self, ClientError> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(OpenOptions::new().create(true).write(true).truncate(true).open(p)?)
            }
            None => None,
        };
        Ok(MetricLog { file })
    }

    fn write(&mut self, rec: &MetricRecord) -> Result<(), ClientError> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec).expect("metric record serializes");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub job_id: String,
    pub train: Vec<TrainStepReport>,
    /// Validation curve; the first point is taken before any training.
    pub validation: Vec<ValidationReport>,
    pub checkpoints: Vec<u64>,
    pub stopped_early: bool,
    pub final_status: Option<JobStatus>,
}

/// The driver loop: train_step, periodic validation and checkpoints.
fn drive(job_id: &str, task: &TaskClient, cfg: &TrainLoopConfig) -> Result<TrainingReport, ClientError> {
    let mut log = MetricLog::open(cfg.metrics_path.as_deref())?;
    let mut report = TrainingReport {
        job_id: job_id.to_string(),
        train: Vec::new(),
        validation: Vec::new(),
        checkpoints: Vec::new(),
        stopped_early: false,
        final_status: None,
    };
    let v0 = task.validate(cfg.validation_episodes)?;
    log.write(&MetricRecord::val(&v0))?;
    let mut best = v0.mean;
    let mut stale = 0;
    report.validation.push(v0);
    for step in 1..=cfg.total_steps {
        if interrupted() {
            return Err(ClientError::Interrupted);
        }
        let r = task.train_step()?;
        log.write(&MetricRecord::train(&r))?;
        report.train.push(r);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            report.checkpoints.push(task.save_checkpoint()?);
        }
        if step % cfg.validate_every == 0 {
            let v = task.validate(cfg.validation_episodes)?;
            log.write(&MetricRecord::val(&v))?;
            let mean = v.mean;
            report.validation.push(v);
            if let Some(c) = cfg.convergence {
                if mean > best + c.threshold {
                    best = mean;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= c.patience {
                        log::info!("{job_id}: converged at step {step}");
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(report)
}

fn launch(
    sched: &Arc<SchedulerClient>,
    spec: &JobSpec,
    cfg: &TrainLoopConfig,
) -> Result<(LifecycleGuard, TaskClient), ClientError> {
    let handle = sched.submit(spec)?;
    let guard = LifecycleGuard::new(sched.clone(), &handle.job_id, cfg.heartbeat_interval);
    let running = sched.wait_running(&handle.job_id, cfg.launch_timeout)?;
    let endpoint = running.endpoints.first().ok_or_else(|| ClientError::JobFailed(handle.job_id.clone(), running.status))?;
    let task = TaskClient::connect(endpoint)?;
    Ok((guard, task))
}

fn finish(guard: LifecycleGuard, report: &mut TrainingReport) {
    if let Some(Ok(h)) = guard.release() {
        report.final_status = Some(h.status);
    }
}

pub fn rl_fit(scheduler_addr: &str, spec: &JobSpec, cfg: &TrainLoopConfig) -> Result<TrainingReport, ClientError> {
    cfg.validate()?;
    let sched = Arc::new(SchedulerClient::connect(scheduler_addr)?);
    let (guard, task) = launch(&sched, spec, cfg)?;
    let mut report = drive(guard.job_id(), &task, cfg)?;
    finish(guard, &mut report);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode_id: String,
    pub score: f64,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub job_id: String,
    pub mean: f64,
    pub episodes: Vec<EpisodeReport>,
}

/// Greedy inference episodes from a checkpointed policy.
pub fn run_inference(scheduler_addr: &str, spec: &JobSpec, episodes: usize) -> Result<EvaluationReport, ClientError> {
    if spec.job_type != JobType::Inference {
        return Err(ClientError::InvalidSpec("run_inference needs an INFERENCE job".into()));
    }
    if spec.checkpoint_init.is_none() {
        return Err(ClientError::CheckpointRequired);
    }
    let sched = Arc::new(SchedulerClient::connect(scheduler_addr)?);
    let cfg = TrainLoopConfig::default();
    let (guard, task) = launch(&sched, spec, &cfg)?;
    #[derive(Deserialize)]
    struct Reply {
        episodes: Vec<EpisodeReport>,
    }
    let reply: Reply = task.call(MessageKind::Validate, json!({ "num_episodes": episodes, "transcripts": true }))?;
    guard.release();
    let mean = if reply.episodes.is_empty() {
        0.0
    } else {
        reply.episodes.iter().map(|e| e.score).sum::<f64>() / reply.episodes.len() as f64
    };
    Ok(EvaluationReport { job_id: guard.job_id().to_string(), mean, episodes: reply.episodes })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiAgentReport {
    pub agents: BTreeMap<String, TrainingReport>,
    /// Finished games whose agent rewards were summed.
    pub audited_games: usize,
    /// Games whose summed rewards were not exactly zero.
    pub zero_sum_violations: usize,
}

fn metrics_path_for(base: Option<&Path>, agent: &str) -> Option<PathBuf> {
    base.map(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
        p.with_file_name(format!("{stem}-{agent}.{ext}"))
    })
}

/// Trains one independent policy per protocol agent in a shared two-agent
/// environment. Every agent's job must fit in the scheduler at once.
pub fn multi_agent_fit(
    scheduler_addr: &str,
    specs: &[JobSpec],
    protocol: &ProtocolSpec,
    cfg: &TrainLoopConfig,
) -> Result<MultiAgentReport, ClientError> {
    cfg.validate()?;
    protocol.validate().map_err(|e| ClientError::InvalidSpec(e.to_string()))?;
    if specs.len() != protocol.agents.len() {
        return Err(ClientError::InvalidSpec(format!(
            "{} specs for {} protocol agents",
            specs.len(),
            protocol.agents.len()
        )));
    }
    let shared = |key: &str| -> Result<Option<Value>, ClientError> {
        let first = specs[0].hyperparameters.get(key).cloned();
        if specs.iter().any(|s| s.hyperparameters.get(key).cloned() != first) {
            return Err(ClientError::InvalidSpec(format!("agents must share {key}")));
        }
        Ok(first)
    };
    shared("seed")?;
    shared("group_size")?;

    let sched = Arc::new(SchedulerClient::connect(scheduler_addr)?);
    let info = sched.info()?;
    let mut need: BTreeMap<String, u64> = BTreeMap::new();
    for s in specs {
        for (res, n) in &s.resources {
            *need.entry(res.clone()).or_default() += *n as u64;
        }
    }
    for (res, n) in &need {
        let cap = info["capacity"][res].as_u64().unwrap_or(0);
        if *n > cap {
            return Err(ClientError::Remote {
                code: "InsufficientCapacity".into(),
                message: format!("agents need {n} {res} slots together, scheduler has {cap}"),
            });
        }
    }

    let match_id = format!("m{}", now_millis());
    let mut launched = Vec::new();
    for (i, (spec, agent)) in specs.iter().zip(&protocol.agents).enumerate() {
        let mut spec = spec.clone();
        let hp = &mut spec.hyperparameters;
        hp.insert("agent_id".into(), json!(agent));
        hp.insert("env_kind".into(), json!("gomoku2"));
        hp.insert("match_id".into(), json!(match_id));
        hp.entry("seat".into()).or_insert(json!(if i == 0 { "X" } else { "O" }));
        let handle = sched.submit(&spec)?;
        launched.push((agent.clone(), LifecycleGuard::new(sched.clone(), &handle.job_id, cfg.heartbeat_interval)));
    }

    let results: Vec<(String, Result<TrainingReport, ClientError>)> = thread::scope(|scope| {
        let workers: Vec<_> = launched
            .iter()
            .map(|(agent, guard)| {
                let sched = sched.clone();
                let mut cfg = cfg.clone();
                cfg.metrics_path = metrics_path_for(cfg.metrics_path.as_deref(), agent);
                // a shared round schedule: agents must not stop at different steps
                cfg.convergence = None;
                scope.spawn(move || {
                    let run = || -> Result<TrainingReport, ClientError> {
                        let h = sched.wait_running(guard.job_id(), cfg.launch_timeout)?;
                        let ep = h.endpoints.first().ok_or_else(|| ClientError::JobFailed(h.job_id.clone(), h.status))?;
                        drive(guard.job_id(), &TaskClient::connect(ep)?, &cfg)
                    };
                    let out = run();
                    if out.is_err() {
                        guard.release();
                    }
                    out
                })
            })
            .collect();
        launched
            .iter()
            .zip(workers)
            .map(|((agent, _), w)| (agent.clone(), w.join().unwrap_or_else(|_| Err(ClientError::Interrupted))))
            .collect()
    });

    let mut agents = BTreeMap::new();
    for ((agent, res), (_, guard)) in results.into_iter().zip(launched) {
        let mut report = res?;
        finish(guard, &mut report);
        agents.insert(agent, report);
    }
    let (audited_games, zero_sum_violations) = zero_sum_audit(&agents);
    Ok(MultiAgentReport { agents, audited_games, zero_sum_violations })
}

/// Sums the agents' returns for every game all of them finished.
fn zero_sum_audit(agents: &BTreeMap<String, TrainingReport>) -> (usize, usize) {
    let mut sums: BTreeMap<(u32, u64), (usize, f64)> = BTreeMap::new();
    for report in agents.values() {
        for step in &report.train {
            let (Some(round), Some(games)) = (step.round, &step.game_returns) else { continue };
            for (game, ret) in games {
                let e = sums.entry((round, *game)).or_default();
                e.0 += 1;
                e.1 += ret;
            }
        }
    }
    let complete: Vec<f64> = sums.values().filter(|(n, _)| *n == agents.len()).map(|(_, s)| *s).collect();
    (complete.len(), complete.iter().filter(|s| **s != 0.0).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(round: u32, returns: &[(u64, f64)]) -> TrainStepReport {
        TrainStepReport {
            step: round as u64 + 1,
            version: 0,
            mean_return: 0.0,
            std_return: 0.0,
            token_count: 0,
            episodes: returns.len(),
            failed_episodes: 0,
            wallclock_ms: 0,
            round: Some(round),
            game_returns: Some(returns.iter().copied().collect()),
        }
    }

    fn report(steps: Vec<TrainStepReport>) -> TrainingReport {
        TrainingReport {
            job_id: String::new(),
            train: steps,
            validation: vec![],
            checkpoints: vec![],
            stopped_early: false,
            final_status: None,
        }
    }

    #[test]
    fn audit_counts_only_complete_games() {
        let agents = BTreeMap::from([
            ("a".to_string(), report(vec![step(0, &[(0, 1.0), (1, 0.0), (2, -1.0)])])),
            ("b".to_string(), report(vec![step(0, &[(0, -1.0), (1, 0.0)])])),
        ]);
        assert_eq!(zero_sum_audit(&agents), (2, 0));
        let bad = BTreeMap::from([
            ("a".to_string(), report(vec![step(0, &[(0, 1.0)])])),
            ("b".to_string(), report(vec![step(0, &[(0, 1.0)])])),
        ]);
        assert_eq!(zero_sum_audit(&bad), (1, 1));
    }

    #[test]
    fn loop_config_checks() {
        let cfg = TrainLoopConfig { total_steps: 5, validate_every: 10, ..TrainLoopConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainLoopConfig { total_steps: 0, ..TrainLoopConfig::default() }.validate().is_ok());
    }

    #[test]
    fn per_agent_metric_paths() {
        let p = metrics_path_for(Some(Path::new("out/m.jsonl")), "agent_1").unwrap();
        assert_eq!(p, PathBuf::from("out/m-agent_1.jsonl"));
    }
}
