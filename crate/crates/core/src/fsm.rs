//! Multi-turn rollout state machine.
//!
//! PENDING builds the context for a turn, GENERATING decodes one action,
//! INTERACTING sends it to the environment and appends the observation,
//! TERMINATED finalizes the trajectory. Training and inference run the same
//! machine; only the caller decides whether the result feeds an update.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvClient, EnvError};
use crate::policy::codec::{self, CodecError};
use crate::policy::{episode_rng, Decoding, PolicyParams};
use crate::types::{Segment, SegmentSource, TerminationReason, Token, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FsmState {
    Pending,
    Generating,
    Interacting,
    Terminated,
}

impl FsmState {
    pub fn can_transition_to(self, next: FsmState) -> bool {
        use FsmState::*;
        matches!(
            (self, next),
            (Pending, Generating)
                | (Generating, Interacting)
                | (Generating, Terminated)
                | (Interacting, Pending)
                | (Interacting, Terminated)
        )
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FsmState::Pending => "PENDING",
            FsmState::Generating => "GENERATING",
            FsmState::Interacting => "INTERACTING",
            FsmState::Terminated => "TERMINATED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    #[default]
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_turns: u32,
    pub max_action_tokens: usize,
    pub mode: Mode,
    pub decoding: Decoding,
    /// Selects both the environment instance and the sampling stream.
    pub seed: u64,
    pub system_preamble: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_turns: 16,
            max_action_tokens: 16,
            mode: Mode::Train,
            decoding: Decoding::Sample,
            seed: 0,
            system_preamble: String::new(),
        }
    }
}

impl RolloutConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn inference(mut self) -> Self {
        self.mode = Mode::Inference;
        self
    }

    pub fn greedy(mut self) -> Self {
        self.decoding = Decoding::Greedy;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("environment unreachable: {0}")]
    EnvUnreachable(String),
    #[error("environment error: {0}")]
    Env(EnvError),
    #[error("policy error: {0}")]
    Policy(String),
}

impl RolloutError {
    pub fn code(&self) -> &str {
        match self {
            RolloutError::EnvUnreachable(_) => "EnvUnreachable",
            RolloutError::Env(e) => e.code(),
            RolloutError::Policy(_) => "PolicyError",
        }
    }
}

impl From<EnvError> for RolloutError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Unreachable(m) => RolloutError::EnvUnreachable(m),
            other => RolloutError::Env(other),
        }
    }
}

impl From<CodecError> for RolloutError {
    fn from(e: CodecError) -> Self {
        RolloutError::Policy(e.to_string())
    }
}

/// Instrumentation collected while an episode runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    /// Every state entered, starting with PENDING.
    pub states: Vec<FsmState>,
    /// Context length at the start of each GENERATING visit.
    pub generation_contexts: Vec<usize>,
}

impl EpisodeTrace {
    pub fn illegal_transitions(&self) -> usize {
        self.states.windows(2).filter(|w| !w[0].can_transition_to(w[1])).count()
            + usize::from(self.states.first().is_some_and(|s| *s != FsmState::Pending))
    }
}

/// Decodes one action: tokens until the end-of-action token or the budget.
pub fn generate_action<R: rand::Rng + ?Sized>(
    policy: &PolicyParams,
    context: &[Token],
    decoding: Decoding,
    max_tokens: usize,
    rng: &mut R,
) -> Vec<Token> {
    let mut ctx = context.to_vec();
    let mut action = Vec::new();
    while action.len() < max_tokens {
        let tok = policy.next_token(&ctx, decoding, rng);
        action.push(tok);
        ctx.push(tok);
        if tok.is_end_of_action() {
            break;
        }
    }
    action
}

pub fn run_episode(policy: &PolicyParams, env: &dyn EnvClient, config: &RolloutConfig) -> Result<Trajectory, RolloutError> {
    run_episode_traced(policy, env, config, &mut EpisodeTrace::default())
}

/// Same machine as [`run_episode`]; callers must not feed the result to an update.
pub fn run_inference(
    policy: &PolicyParams,
    env: &dyn EnvClient,
    config: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    let config = RolloutConfig { mode: Mode::Inference, ..config.clone() };
    run_episode(policy, env, &config)
}

pub fn run_episode_traced(
    policy: &PolicyParams,
    env: &dyn EnvClient,
    config: &RolloutConfig,
    trace: &mut EpisodeTrace,
) -> Result<Trajectory, RolloutError> {
    let mut rng = episode_rng(config.seed);
    let mut traj = Trajectory::new(format!("ep-{}", config.seed));
    let (env_episode, initial) = env.reset(config.seed)?;
    let mut context: Vec<Token> = Vec::new();
    let mut turn: u32 = 0;
    let mut state = FsmState::Pending;
    trace.states.push(state);
    let mut pending_action: Vec<Token> = Vec::new();

    let enter = |next: FsmState, state: &mut FsmState, trace: &mut EpisodeTrace| {
        debug_assert!(state.can_transition_to(next), "{state} -> {next}");
        log::trace!("episode {}: {state} -> {next}", config.seed);
        *state = next;
        trace.states.push(next);
    };

    loop {
        match state {
            FsmState::Pending => {
                if turn == 0 {
                    let text = format!("{}{}", config.system_preamble, initial.text);
                    let tokens = codec::encode(&text)?;
                    if !tokens.is_empty() {
                        context.extend_from_slice(&tokens);
                        traj.segments.push(Segment { source: SegmentSource::Context, tokens, turn_index: 0 });
                    }
                }
                enter(FsmState::Generating, &mut state, trace);
            }
            FsmState::Generating => {
                trace.generation_contexts.push(context.len());
                let action =
                    generate_action(policy, &context, config.decoding, config.max_action_tokens, &mut rng);
                if action.is_empty() {
                    traj.termination_reason = Some(TerminationReason::MaxTokens);
                    enter(FsmState::Terminated, &mut state, trace);
                    continue;
                }
                context.extend_from_slice(&action);
                traj.segments.push(Segment { source: SegmentSource::Action, tokens: action.clone(), turn_index: turn });
                pending_action = action;
                enter(FsmState::Interacting, &mut state, trace);
            }
            FsmState::Interacting => {
                let body: Vec<Token> =
                    pending_action.iter().copied().filter(|t| !t.is_end_of_action()).collect();
                let result = env.step(&env_episode, &codec::decode(&body))?;
                let observation = codec::encode(&result.state.text)?;
                if !observation.is_empty() {
                    context.extend_from_slice(&observation);
                    traj.segments.push(Segment {
                        source: SegmentSource::Observation,
                        tokens: observation,
                        turn_index: turn,
                    });
                }
                traj.turn_rewards.insert(turn, result.score);
                turn += 1;
                if result.done {
                    traj.termination_reason = Some(TerminationReason::EnvDone);
                    enter(FsmState::Terminated, &mut state, trace);
                } else if turn >= config.max_turns {
                    traj.termination_reason = Some(TerminationReason::MaxTurns);
                    enter(FsmState::Terminated, &mut state, trace);
                } else {
                    enter(FsmState::Pending, &mut state, trace);
                }
            }
            FsmState::Terminated => {
                traj.terminated = true;
                return Ok(traj);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReport {
    pub context_tokens: usize,
    pub action_tokens: usize,
    pub observation_tokens: usize,
}

pub fn mask_report(t: &Trajectory) -> MaskReport {
    let mut r = MaskReport::default();
    for seg in &t.segments {
        let n = seg.tokens.len();
        match seg.source {
            SegmentSource::Context => r.context_tokens += n,
            SegmentSource::Action => r.action_tokens += n,
            SegmentSource::Observation => r.observation_tokens += n,
        }
    }
    r
}
