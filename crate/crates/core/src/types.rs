//! Shared data model: tokens, trajectory segments, job records and
//! environment step results.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Number of symbols in the token vocabulary (7-bit ASCII).
pub const VOCAB_SIZE: usize = 128;

/// Reserved end-of-action token (ASCII newline).
pub const END_OF_ACTION: Token = Token(10);

/// A single vocabulary symbol in `[0, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Token(u8);

impl Token {
    pub fn new(value: u8) -> Option<Self> {
        (value < VOCAB_SIZE as u8).then_some(Token(value))
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_end_of_action(self) -> bool {
        self == END_OF_ACTION
    }
}

impl TryFrom<u8> for Token {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Token::new(value).ok_or_else(|| format!("token {value} outside [0, 127]"))
    }
}

impl From<Token> for u8 {
    fn from(t: Token) -> u8 {
        t.0
    }
}

/// Where the tokens of a segment came from; decides the loss mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentSource {
    Context,
    Action,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub source: SegmentSource,
    pub tokens: Vec<Token>,
    pub turn_index: u32,
}

impl Segment {
    /// Only generated action tokens contribute to the training objective.
    pub fn trainable(&self) -> bool {
        self.source == SegmentSource::Action
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TerminationReason {
    EnvDone,
    MaxTurns,
    MaxTokens,
    InvalidAction,
}

/// The complete record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub segments: Vec<Segment>,
    pub turn_rewards: BTreeMap<u32, f64>,
    pub terminated: bool,
    pub termination_reason: Option<TerminationReason>,
}

impl Trajectory {
    pub fn new(episode_id: impl Into<String>) -> Self {
        Trajectory {
            episode_id: episode_id.into(),
            segments: Vec::new(),
            turn_rewards: BTreeMap::new(),
            terminated: false,
            termination_reason: None,
        }
    }

    /// Undiscounted episode return.
    pub fn episode_return(&self) -> f64 {
        self.turn_rewards.values().sum()
    }

    /// All tokens in order, concatenated across segments.
    pub fn tokens(&self) -> Vec<Token> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn action_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.trainable())
    }
}

/// Checks every structural invariant of a trajectory; empty result means valid.
pub fn validate_trajectory(t: &Trajectory) -> Vec<String> {
    let mut violations = Vec::new();
    if !t.terminated {
        violations.push("not terminated".to_string());
    } else if t.termination_reason.is_none() {
        violations.push("terminated without a termination reason".to_string());
    }
    let mut last_turn = 0u32;
    let mut missing = Vec::new();
    for (i, seg) in t.segments.iter().enumerate() {
        if seg.turn_index < last_turn {
            violations.push(format!(
                "turn index decreases at segment {i} ({} after {last_turn})",
                seg.turn_index
            ));
        }
        last_turn = last_turn.max(seg.turn_index);
        if seg.source == SegmentSource::Action {
            if seg.tokens.is_empty() {
                violations.push(format!("empty action segment at turn {}", seg.turn_index));
            }
            if !t.turn_rewards.contains_key(&seg.turn_index) && !missing.contains(&seg.turn_index)
            {
                missing.push(seg.turn_index);
            }
        }
    }
    for turn in missing {
        violations.push(format!("missing reward for turn {turn}"));
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobType {
    Rl,
    Sft,
    Inference,
}

/// Where a job's environment lives: in the task-server process or behind a
/// network address.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum EnvEndpoint {
    #[default]
    Local,
    Remote(String),
}

impl Serialize for EnvEndpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            EnvEndpoint::Local => s.serialize_str("LOCAL"),
            EnvEndpoint::Remote(addr) => s.serialize_str(addr),
        }
    }
}

impl<'de> Deserialize<'de> for EnvEndpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s.eq_ignore_ascii_case("local") {
            EnvEndpoint::Local
        } else {
            EnvEndpoint::Remote(s)
        })
    }
}

/// Reference to a checkpoint in a store directory; `version: None` means LATEST.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub store: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_type: JobType,
    pub resources: BTreeMap<String, u32>,
    #[serde(default)]
    pub env_endpoint: EnvEndpoint,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_init: Option<CheckpointRef>,
}

impl JobSpec {
    pub fn new(job_type: JobType) -> Self {
        JobSpec {
            job_type,
            resources: BTreeMap::new(),
            env_endpoint: EnvEndpoint::Local,
            hyperparameters: BTreeMap::new(),
            checkpoint_init: None,
        }
    }

    pub fn with_resource(mut self, name: &str, slots: u32) -> Self {
        self.resources.insert(name.to_string(), slots);
        self
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.hyperparameters.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some((name, _)) = self.resources.iter().find(|(_, &n)| n == 0) {
            return Err(format!("resource {name:?} requests zero slots"));
        }
        if self.resources.keys().any(|k| k.is_empty()) {
            return Err("empty resource name".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Terminating,
    Finished,
    Failed,
    Reaped,
}

impl JobStatus {
    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Finished | JobStatus::Failed | JobStatus::Reaped)
    }

    /// Legal lifecycle edges. `Queued -> Finished` is the cancellation of a
    /// job that never launched, `Queued -> Failed` a launch that never
    /// reported ready and `Queued -> Reaped` a waiting job whose client
    /// stopped sending heartbeats.
    pub fn can_transition_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Queued, Running)
                | (Queued, Finished)
                | (Queued, Failed)
                | (Queued, Reaped)
                | (Running, Terminating)
                | (Running, Failed)
                | (Running, Reaped)
                | (Terminating, Finished)
                | (Terminating, Reaped)
        )
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(Value::as_str).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub status: JobStatus,
    pub endpoints: Vec<String>,
    pub allocated: BTreeMap<String, Vec<u32>>,
    /// Milliseconds since the Unix epoch.
    pub last_heartbeat: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Value>,
}

/// Rendered environment state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvState {
    pub text: String,
}

impl EnvState {
    pub fn new(text: impl Into<String>) -> Self {
        EnvState { text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub state: EnvState,
    pub score: f64,
    pub done: bool,
    #[serde(default)]
    pub info: serde_json::Map<String, Value>,
}

pub fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
