//! One job's execution engine: policy snapshot, rollout batches, updates,
//! validation, generation and checkpoints.

pub mod service;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coordinator::round::RoundError;
use crate::coordinator::{run_round, CoordError, CoordinatorApi, ProtocolSpec, SeatClient, TurnGate};
use crate::env::{EnvBackend, EnvClient, EnvKind, KindClient, Seat};
use crate::fsm::{generate_action, run_episode, run_inference, RolloutConfig, RolloutError};
use crate::policy::{
    codec, episode_rng, update, Advantage, CheckpointError, CheckpointMetadata, CheckpointStore, Decoding,
    PolicyParams, UpdateError, UpdateOptions, VersionSel,
};
use crate::sft;
use crate::types::{CheckpointRef, JobSpec, JobType, Trajectory};

/// Validation seeds are training seeds shifted by this offset.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_000;

fn d_lr() -> f64 {
    0.5
}
fn d_group() -> usize {
    16
}
fn d_turns() -> u32 {
    16
}
fn d_tokens() -> usize {
    16
}
fn d_window() -> usize {
    crate::policy::model::DEFAULT_CONTEXT_WINDOW
}
fn d_temperature() -> f64 {
    1.0
}
fn d_parallelism() -> usize {
    8
}
fn d_val_episodes() -> usize {
    100
}
fn d_prior_lr() -> f64 {
    0.001
}
fn d_prior_epochs() -> usize {
    40
}
fn d_prior_positions() -> usize {
    200
}
fn d_match() -> String {
    "match".into()
}

/// Hyperparameters understood by the task server; unknown keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSettings {
    #[serde(default)]
    pub job_id: String,
    #[serde(default = "default_job_type")]
    pub job_type: JobType,
    #[serde(default = "default_env_kind", alias = "env")]
    pub env_kind: EnvKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_group")]
    pub group_size: usize,
    #[serde(default = "d_turns")]
    pub max_turns: u32,
    #[serde(default = "d_tokens")]
    pub max_action_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_window")]
    pub context_window: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_parallelism")]
    pub rollout_parallelism: usize,
    #[serde(default = "d_val_episodes")]
    pub validation_episodes: usize,
    #[serde(default)]
    pub system_preamble: String,
    #[serde(default)]
    pub seat: Option<Seat>,
    /// Warm start by cloning the answer-format prior before training.
    #[serde(default)]
    pub format_prior: bool,
    #[serde(default = "d_prior_lr")]
    pub prior_learning_rate: f64,
    #[serde(default = "d_prior_epochs")]
    pub prior_epochs: usize,
    #[serde(default = "d_prior_positions")]
    pub prior_positions: usize,
    #[serde(default)]
    pub sft_data: Option<PathBuf>,
    /// Multi-agent jobs: this agent's id and the coordinator address.
    #[serde(default)]
    pub agent_id: Option<String>,
    #[serde(default)]
    pub coordinator: Option<String>,
    #[serde(default = "d_match")]
    pub match_id: String,
    #[serde(default, skip)]
    pub checkpoint_init: Option<CheckpointRef>,
}

fn default_job_type() -> JobType {
    JobType::Rl
}

fn default_env_kind() -> EnvKind {
    EnvKind::Arith
}

impl Default for TaskSettings {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults deserialize")
    }
}

impl TaskSettings {
    pub fn from_spec(job_id: &str, spec: &JobSpec) -> Result<Self, String> {
        let map: serde_json::Map<String, Value> =
            spec.hyperparameters.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut s: TaskSettings =
            serde_json::from_value(Value::Object(map)).map_err(|e| format!("hyperparameters: {e}"))?;
        s.job_id = job_id.to_string();
        s.job_type = spec.job_type;
        s.checkpoint_init = spec.checkpoint_init.clone();
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.group_size == 0 || self.max_turns == 0 || self.context_window == 0 {
            return Err("group_size, max_turns and context_window must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        if self.job_type == JobType::Sft && self.sft_data.is_none() {
            return Err("SFT jobs need sft_data".into());
        }
        if self.job_type == JobType::Inference && self.checkpoint_init.is_none() {
            return Err("CheckpointRequired: inference jobs need checkpoint_init".into());
        }
        if self.is_multi_agent() && self.agent_id.is_none() {
            return Err("two-agent jobs need agent_id".into());
        }
        Ok(())
    }

    pub fn is_multi_agent(&self) -> bool {
        self.env_kind == EnvKind::GomokuTwoAgent
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            max_turns: self.max_turns,
            max_action_tokens: self.max_action_tokens,
            system_preamble: self.system_preamble.clone(),
            ..RolloutConfig::default()
        }
    }

    /// Kind of environment validation runs against; two-agent jobs are
    /// validated against the built-in random opponent.
    pub fn validation_kind(&self) -> EnvKind {
        match self.env_kind {
            EnvKind::GomokuTwoAgent => EnvKind::Gomoku,
            k => k,
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("job is stopping")]
    JobStopping,
    #[error("{0}")]
    InvalidJobType(String),
    #[error("every episode of the group failed: {0}")]
    EmptyGroup(String),
    #[error("environment unreachable: {0}")]
    EnvUnreachable(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("no checkpoint store configured")]
    NoCheckpointStore,
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl TaskError {
    pub fn code(&self) -> &str {
        match self {
            TaskError::JobStopping => "JobStopping",
            TaskError::InvalidJobType(_) => "InvalidJobType",
            TaskError::EmptyGroup(_) => "EmptyGroup",
            TaskError::EnvUnreachable(_) => "EnvUnreachable",
            TaskError::Checkpoint(e) => e.code(),
            TaskError::NoCheckpointStore => "StoreIOError",
            TaskError::Update(UpdateError::EmptyGroup) => "EmptyGroup",
            TaskError::Update(UpdateError::UnterminatedTrajectory(_)) => "UnterminatedTrajectory",
            TaskError::Update(_) => "PolicyError",
            TaskError::Coord(CoordError::StaleAgent(_)) => "RoundAborted",
            TaskError::Coord(e) => e.code(),
            TaskError::BadRequest(_) => "BadRequest",
        }
    }
}

impl From<RolloutError> for TaskError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::EnvUnreachable(m) => TaskError::EnvUnreachable(m),
            other => TaskError::BadRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub version: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub token_count: usize,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub wallclock_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    /// Per-game episode returns for two-agent rounds, indexed by game.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game_returns: Option<BTreeMap<u64, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    /// Fraction of episodes with return of at least 1 (wins, correct answers).
    pub win_rate: f64,
    pub episodes: usize,
    pub tokens: usize,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "greedy")]
    pub decoding: Decoding,
    #[serde(default = "d_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn greedy() -> Decoding {
    Decoding::Greedy
}

struct Cursor {
    /// Successful train_steps since start.
    step: u64,
    /// Seed position: steps of data consumed, restored from checkpoints.
    position: u64,
    version: u64,
    parent_version: Option<u64>,
}

type MetricSink = Box<dyn Fn(&str, u64, &Value) + Send + Sync>;

pub struct TaskServer {
    settings: TaskSettings,
    env: Arc<dyn EnvBackend>,
    store: Option<CheckpointStore>,
    snapshot: RwLock<Arc<PolicyParams>>,
    cursor: Mutex<Cursor>,
    stopping: AtomicBool,
    coordinator: Option<(Arc<dyn CoordinatorApi>, ProtocolSpec)>,
    sft_data: Option<Vec<Trajectory>>,
    metric_sink: Option<MetricSink>,
}

impl TaskServer {
    pub fn new(
        settings: TaskSettings,
        env: Arc<dyn EnvBackend>,
        store: Option<CheckpointStore>,
        coordinator: Option<Arc<dyn CoordinatorApi>>,
    ) -> Result<Self, TaskError> {
        settings.validate().map_err(TaskError::BadRequest)?;
        let mut params = PolicyParams::new(settings.context_window);
        params.temperature = settings.temperature;
        let mut parent = None;
        let mut position = 0;
        if let Some(init) = &settings.checkpoint_init {
            let store = CheckpointStore::open(&init.store)?;
            let sel = init.version.map_or(VersionSel::Latest, VersionSel::Exact);
            let ckpt = store.load(sel)?;
            params = ckpt.params;
            parent = Some(ckpt.version);
            position = ckpt.metadata.step;
        } else if settings.format_prior {
            let seat = settings.seat.unwrap_or(Seat::X);
            let prior = sft::format_prior(
                settings.env_kind,
                seat,
                settings.prior_positions,
                settings.seed,
                &settings.system_preamble,
            );
            let opts = UpdateOptions {
                learning_rate: settings.prior_learning_rate,
                advantage: Advantage::Fixed(1.0),
                trace: false,
            };
            for _ in 0..settings.prior_epochs {
                params = update(&params, &prior, opts)?.0;
            }
        }
        let sft_data = match &settings.sft_data {
            Some(path) if settings.job_type == JobType::Sft => Some(
                sft::read_trajectories(path)
                    .map_err(|e| TaskError::BadRequest(format!("sft_data {}: {e}", path.display())))?,
            ),
            _ => None,
        };
        let coordinator = match coordinator {
            Some(c) if settings.is_multi_agent() => {
                let agent = settings.agent_id.as_deref().expect("validated");
                let spec = c.register(agent)?;
                Some((c, spec))
            }
            _ => None,
        };
        Ok(TaskServer {
            settings,
            env,
            store,
            snapshot: RwLock::new(Arc::new(params)),
            cursor: Mutex::new(Cursor { step: 0, position, version: 0, parent_version: parent }),
            stopping: AtomicBool::new(false),
            coordinator,
            sft_data,
            metric_sink: None,
        })
    }

    /// Receives (kind, step, report) after every train_step and validation.
    pub fn set_metric_sink(&mut self, sink: impl Fn(&str, u64, &Value) + Send + Sync + 'static) {
        self.metric_sink = Some(Box::new(sink));
    }

    pub fn settings(&self) -> &TaskSettings {
        &self.settings
    }

    pub fn params(&self) -> Arc<PolicyParams> {
        self.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn step_counter(&self) -> u64 {
        self.cursor.lock().unwrap_or_else(|p| p.into_inner()).step
    }

    pub fn snapshot_version(&self) -> u64 {
        self.cursor.lock().unwrap_or_else(|p| p.into_inner()).version
    }

    pub fn protocol(&self) -> Option<&ProtocolSpec> {
        self.coordinator.as_ref().map(|(_, s)| s)
    }

    pub fn begin_stop(&self) {
        self.stopping.store(true, Ordering::SeqCst);
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping.load(Ordering::SeqCst)
    }

    fn check_running(&self) -> Result<(), TaskError> {
        if self.is_stopping() {
            return Err(TaskError::JobStopping);
        }
        Ok(())
    }

    fn emit(&self, kind: &str, step: u64, report: &impl Serialize) {
        if let Some(sink) = &self.metric_sink {
            if let Ok(v) = serde_json::to_value(report) {
                sink(kind, step, &v);
            }
        }
    }

    fn env_client(&self, kind: EnvKind) -> KindClient {
        let client = KindClient::new(self.env.clone(), kind);
        match self.settings.seat {
            Some(seat) if kind == EnvKind::Gomoku => client.with_seat(seat),
            _ => client,
        }
    }

    /// Runs one episode per seed with bounded parallelism; results keep seed order.
    fn rollout(
        &self,
        params: &PolicyParams,
        env: &dyn EnvClient,
        seeds: &[u64],
        config: &RolloutConfig,
        inference: bool,
    ) -> Vec<Result<Trajectory, RolloutError>> {
        let workers = self.settings.rollout_parallelism.clamp(1, seeds.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Trajectory, RolloutError>>>> =
            seeds.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= seeds.len() {
                        break;
                    }
                    let cfg = config.clone().with_seed(seeds[i]);
                    let out = if inference { run_inference(params, env, &cfg) } else { run_episode(params, env, &cfg) };
                    *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(out);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every seed ran")).collect()
    }

    pub fn train_step(&self, group_size: Option<usize>, env_seed_base: Option<u64>) -> Result<TrainStepReport, TaskError> {
        self.check_running()?;
        let started = Instant::now();
        // holding the write lock queues validation and generation behind the publish point
        let mut snapshot = self.snapshot.write().unwrap_or_else(|p| p.into_inner());
        let mut cursor = self.cursor.lock().unwrap_or_else(|p| p.into_inner());
        let params = snapshot.clone();
        let g = group_size.unwrap_or(self.settings.group_size).max(1);
        let (next, stats, failed, round, game_returns) = match self.settings.job_type {
            JobType::Inference => {
                return Err(TaskError::InvalidJobType("inference jobs do not train".into()));
            }
            JobType::Sft => {
                let data = self.sft_data.as_deref().unwrap_or_default();
                let opts = UpdateOptions {
                    learning_rate: self.settings.learning_rate,
                    advantage: Advantage::Fixed(1.0),
                    trace: false,
                };
                let (next, stats) = update(&params, data, opts)?;
                (next, stats, 0, None, None)
            }
            JobType::Rl if self.coordinator.is_some() => {
                let (next, stats, failed, games) = self.coordinated_round(&params, g, cursor.position as u32)?;
                (next, stats, failed, Some(cursor.position as u32), Some(games))
            }
            JobType::Rl => {
                let base = env_seed_base.unwrap_or(self.settings.seed + cursor.position * g as u64);
                let seeds: Vec<u64> = (base..base + g as u64).collect();
                let env = self.env_client(self.settings.env_kind);
                let results = self.rollout(&params, &env, &seeds, &self.settings.rollout_config(), false);
                let (group, failed) = split_failures(results)?;
                let (next, stats) = update(&params, &group, UpdateOptions::new(self.settings.learning_rate))?;
                (next, stats, failed, None, None)
            }
        };
        *snapshot = Arc::new(next);
        cursor.step += 1;
        cursor.position += 1;
        cursor.version += 1;
        let report = TrainStepReport {
            step: cursor.step,
            version: cursor.version,
            mean_return: stats.mean_return,
            std_return: stats.std_return,
            token_count: stats.token_count,
            episodes: stats.episodes,
            failed_episodes: failed,
            wallclock_ms: started.elapsed().as_millis() as u64,
            round,
            game_returns,
        };
        drop(cursor);
        drop(snapshot);
        self.emit("train", report.step, &report);
        Ok(report)
    }

    /// One coordinator round: G two-agent games played turn by turn, then one update.
    fn coordinated_round(
        &self,
        params: &Arc<PolicyParams>,
        games: usize,
        round: u32,
    ) -> Result<(PolicyParams, crate::policy::UpdateStats, usize, BTreeMap<u64, f64>), TaskError> {
        let (coord, spec) = self.coordinator.as_ref().expect("multi-agent job");
        let agent = self.settings.agent_id.as_deref().expect("validated");
        let seat = self.settings.seat.unwrap_or(if spec.position(agent) == Some(0) { Seat::X } else { Seat::O });
        let gate = Arc::new(TurnGate::default());
        let match_id = format!("{}-r{round}", self.settings.match_id);
        let base = self.settings.seed + round as u64 * games as u64;
        let config = self.settings.rollout_config();
        let mut handles = Vec::with_capacity(games);
        for i in 0..games as u64 {
            gate.enroll();
            let client = SeatClient::new(self.env.clone(), gate.clone(), seat, match_id.clone());
            let params = params.clone();
            let gate = gate.clone();
            let cfg = config.clone().with_seed(base + i);
            handles.push(thread::spawn(move || {
                let out = run_episode(&params, &client, &cfg);
                gate.finish();
                out
            }));
        }
        let lr = self.settings.learning_rate;
        let outcome = run_round(
            coord.as_ref(),
            spec,
            agent,
            round,
            |_grant| gate.open_and_settle().map_err(TaskError::EnvUnreachable),
            || {
                gate.close();
                let results: Vec<_> = handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(RolloutError::Policy("episode thread panicked".into()))))
                    .collect();
                let mut returns = BTreeMap::new();
                for (i, r) in results.iter().enumerate() {
                    if let Ok(t) = r {
                        returns.insert(i as u64, t.episode_return());
                    }
                }
                let (group, failed) = split_failures(results)?;
                let (next, stats) = update(params, &group, UpdateOptions::new(lr))?;
                Ok((next, stats, failed, returns))
            },
        );
        match outcome {
            Ok(stats) => Ok(stats.update),
            Err(RoundError::Coord(e)) => {
                gate.close();
                Err(e.into())
            }
            Err(RoundError::Work(e)) => {
                gate.close();
                Err(e)
            }
        }
    }

    pub fn validate(&self, num_episodes: Option<usize>, seed_base: Option<u64>) -> Result<ValidationReport, TaskError> {
        self.check_running()?;
        let started = Instant::now();
        let params = self.params();
        let step = self.step_counter();
        let n = num_episodes.unwrap_or(self.settings.validation_episodes);
        let base = seed_base.unwrap_or(self.settings.seed + VALIDATION_SEED_OFFSET);
        let seeds: Vec<u64> = (base..base + n as u64).collect();
        let env = self.env_client(self.settings.validation_kind());
        let config = self.settings.rollout_config().greedy().inference();
        let results = self.rollout(&params, &env, &seeds, &config, true);
        let mut returns = Vec::with_capacity(n);
        let mut tokens = 0;
        for r in results {
            let t = r?;
            tokens += crate::fsm::mask_report(&t).action_tokens;
            returns.push(t.episode_return());
        }
        let (mean, std) = mean_std(&returns);
        let wins = returns.iter().filter(|r| **r >= 1.0).count();
        let report = ValidationReport {
            step,
            mean,
            std,
            win_rate: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
            episodes: n,
            tokens,
            wallclock_ms: started.elapsed().as_millis() as u64,
        };
        self.emit("val", step, &report);
        Ok(report)
    }

    /// Greedy inference episodes with full transcripts.
    pub fn evaluate(&self, episodes: usize, seed_base: Option<u64>) -> Result<Vec<Trajectory>, TaskError> {
        self.check_running()?;
        let params = self.params();
        let base = seed_base.unwrap_or(self.settings.seed + VALIDATION_SEED_OFFSET);
        let seeds: Vec<u64> = (base..base + episodes as u64).collect();
        let env = self.env_client(self.settings.validation_kind());
        let config = self.settings.rollout_config().greedy().inference();
        self.rollout(&params, &env, &seeds, &config, true).into_iter().map(|r| r.map_err(TaskError::from)).collect()
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<String, TaskError> {
        self.check_running()?;
        let params = self.params();
        let context = codec::encode(&req.prompt).map_err(|e| TaskError::BadRequest(e.to_string()))?;
        let mut rng = episode_rng(req.seed);
        let action = generate_action(&params, &context, req.decoding, req.max_tokens, &mut rng);
        let body: Vec<_> = action.into_iter().filter(|t| !t.is_end_of_action()).collect();
        Ok(codec::decode(&body))
    }

    pub fn save_checkpoint(&self) -> Result<u64, TaskError> {
        self.check_running()?;
        let store = self.store.as_ref().ok_or(TaskError::NoCheckpointStore)?;
        let snapshot = self.snapshot.read().unwrap_or_else(|p| p.into_inner());
        let mut cursor = self.cursor.lock().unwrap_or_else(|p| p.into_inner());
        let meta = CheckpointMetadata {
            job_id: self.settings.job_id.clone(),
            step: cursor.position,
            created_at: 0,
            parent_version: cursor.parent_version,
        };
        let version = store.save(&snapshot, meta)?;
        cursor.parent_version = Some(version);
        Ok(version)
    }

    /// Loads `version` (LATEST when `None`) and publishes it atomically.
    pub fn load_checkpoint(&self, version: Option<u64>) -> Result<u64, TaskError> {
        self.check_running()?;
        let store = self.store.as_ref().ok_or(TaskError::NoCheckpointStore)?;
        let ckpt = store.load(version.map_or(VersionSel::Latest, VersionSel::Exact))?;
        let mut snapshot = self.snapshot.write().unwrap_or_else(|p| p.into_inner());
        let mut cursor = self.cursor.lock().unwrap_or_else(|p| p.into_inner());
        *snapshot = Arc::new(ckpt.params);
        cursor.position = ckpt.metadata.step;
        cursor.parent_version = Some(ckpt.version);
        cursor.version += 1;
        Ok(ckpt.version)
    }
}

fn split_failures(results: Vec<Result<Trajectory, RolloutError>>) -> Result<(Vec<Trajectory>, usize), TaskError> {
    let mut group = Vec::with_capacity(results.len());
    let mut first_error = None;
    let mut failed = 0;
    for r in results {
        match r {
            Ok(t) => group.push(t),
            Err(e) => {
                failed += 1;
                log::warn!("episode discarded: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if group.is_empty() {
        let why = first_error.map_or_else(|| "no episodes".to_string(), |e| e.to_string());
        return Err(TaskError::EmptyGroup(why));
    }
    Ok((group, failed))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvHost;
    use crate::policy::checkpoint::params_fingerprint;

    fn server(settings: TaskSettings, store: Option<CheckpointStore>) -> TaskServer {
        let env: Arc<dyn EnvBackend> = Arc::new(EnvHost::new(settings.env_kind));
        TaskServer::new(settings, env, store, None).unwrap()
    }

    fn arith() -> TaskSettings {
        TaskSettings { job_id: "t".into(), env_kind: EnvKind::Arith, ..TaskSettings::default() }
    }

    #[test]
    fn defaults_parse_from_empty_spec() {
        let spec = JobSpec::new(JobType::Rl).with_param("env_kind", "gomoku").with_param("group_size", 4);
        let s = TaskSettings::from_spec("j", &spec).unwrap();
        assert_eq!((s.env_kind, s.group_size, s.learning_rate), (EnvKind::Gomoku, 4, 0.5));
        let bad = JobSpec::new(JobType::Inference);
        assert!(TaskSettings::from_spec("j", &bad).unwrap_err().contains("CheckpointRequired"));
    }

    #[test]
    fn zero_weight_validation_is_at_chance() {
        let s = server(arith(), None);
        let r = s.validate(Some(100), None).unwrap();
        assert!(r.mean < 0.05);
        assert_eq!(s.validate(Some(100), None).unwrap().mean, r.mean);
    }

    #[test]
    fn validation_is_read_only() {
        let s = server(TaskSettings { format_prior: true, ..arith() }, None);
        let before = params_fingerprint(&s.params());
        s.validate(Some(20), None).unwrap();
        assert_eq!(params_fingerprint(&s.params()), before);
        assert_eq!(s.step_counter(), 0);
    }

    #[test]
    fn identical_returns_leave_weights_unchanged() {
        let s = server(arith(), None);
        let before = params_fingerprint(&s.params());
        // zero weights almost never answer correctly: all returns 0
        let r = s.train_step(Some(4), Some(10)).unwrap();
        assert_eq!(r.std_return, 0.0);
        assert_eq!(r.version, 1);
        assert_eq!(params_fingerprint(&s.params()), before);
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let run = |par: usize| {
            let s = server(TaskSettings { format_prior: true, rollout_parallelism: par, ..arith() }, None);
            let r = s.train_step(None, None).unwrap();
            (r.mean_return, r.token_count, params_fingerprint(&s.params()))
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn generate_edges() {
        let s = server(arith(), None);
        let req = |decoding, max_tokens, seed| GenerateRequest { prompt: "3+4=".into(), decoding, max_tokens, seed };
        assert_eq!(s.generate(&req(Decoding::Greedy, 5, 0)).unwrap(), "\0\0\0\0\0");
        assert_eq!(s.generate(&req(Decoding::Greedy, 0, 0)).unwrap(), "");
        assert_eq!(s.generate(&req(Decoding::Sample, 8, 3)).unwrap(), s.generate(&req(Decoding::Sample, 8, 3)).unwrap());
    }

    #[test]
    fn checkpoint_save_load_and_stop() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(TaskSettings { format_prior: true, ..arith() }, Some(CheckpointStore::open(dir.path()).unwrap()));
        assert_eq!(s.save_checkpoint().unwrap(), 0);
        for _ in 0..3 {
            s.train_step(None, None).unwrap();
        }
        let v = s.save_checkpoint().unwrap();
        let at_save = s.validate(None, None).unwrap().mean;
        for _ in 0..3 {
            s.train_step(None, None).unwrap();
        }
        s.load_checkpoint(Some(v)).unwrap();
        assert_eq!(s.validate(None, None).unwrap().mean, at_save);
        assert!(matches!(s.load_checkpoint(Some(99)), Err(TaskError::Checkpoint(CheckpointError::VersionNotFound(99)))));
        s.begin_stop();
        assert_eq!(s.train_step(None, None).unwrap_err().code(), "JobStopping");
    }
}
