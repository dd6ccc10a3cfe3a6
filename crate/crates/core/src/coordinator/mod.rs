//! Agent protocol coordinator.
//!
//! Every round runs four global barriers in order: ROLLOUT ENTER, ROLLOUT
//! EXIT, UPDATE ENTER, UPDATE EXIT. A barrier releases all waiters at once,
//! exactly when every agent of the protocol has arrived. Between the rollout
//! barriers the coordinator hands out `turns_per_round` turn grants in the
//! fixed agent order; at most one agent holds a grant at a time.
//!
//! All protocol state sits behind one mutex, which serializes mutations the
//! way a single event loop would; blocked callers park on a condition
//! variable and are woken by releases, yields and aborts.

pub mod gate;
pub mod remote;
pub mod round;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gate::{SeatClient, TurnGate};
pub use remote::{CoordinatorService, RemoteCoordinator};
pub use round::{run_round, RoundStats};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TurnOrder {
    #[default]
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub agents: Vec<String>,
    #[serde(default)]
    pub order: TurnOrder,
    pub turns_per_round: u32,
    pub rounds: u32,
}

impl ProtocolSpec {
    pub fn new(agents: &[&str], turns_per_round: u32, rounds: u32) -> Self {
        ProtocolSpec {
            agents: agents.iter().map(|a| a.to_string()).collect(),
            order: TurnOrder::Sequential,
            turns_per_round,
            rounds,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.agents.is_empty() {
            return Err("protocol has no agents".into());
        }
        let unique: BTreeSet<_> = self.agents.iter().collect();
        if unique.len() != self.agents.len() {
            return Err("agent ids must be unique".into());
        }
        if self.turns_per_round == 0 || self.rounds == 0 {
            return Err("turns_per_round and rounds must be positive".into());
        }
        Ok(())
    }

    pub fn position(&self, agent: &str) -> Option<usize> {
        self.agents.iter().position(|a| a == agent)
    }

    /// Number of grants `agent` receives per round.
    pub fn turns_for(&self, agent: &str) -> u32 {
        let Some(pos) = self.position(agent) else { return 0 };
        let n = self.agents.len() as u32;
        (0..self.turns_per_round).filter(|t| t % n == pos as u32).count() as u32
    }

    /// Agent holding turn `turn` of a round.
    pub fn agent_for_turn(&self, turn: u32) -> &str {
        &self.agents[turn as usize % self.agents.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Rollout,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BarrierKind {
    Enter,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BarrierId {
    pub round: u32,
    pub phase: Phase,
    pub kind: BarrierKind,
}

const BARRIER_CYCLE: [(Phase, BarrierKind); 4] = [
    (Phase::Rollout, BarrierKind::Enter),
    (Phase::Rollout, BarrierKind::Exit),
    (Phase::Update, BarrierKind::Enter),
    (Phase::Update, BarrierKind::Exit),
];

impl BarrierId {
    pub fn new(round: u32, phase: Phase, kind: BarrierKind) -> Self {
        BarrierId { round, phase, kind }
    }

    /// Position in the global barrier sequence.
    pub fn sequence(self) -> u64 {
        let i = BARRIER_CYCLE.iter().position(|&(p, k)| p == self.phase && k == self.kind).unwrap_or(0);
        self.round as u64 * 4 + i as u64
    }

    pub fn from_sequence(seq: u64) -> Self {
        let (phase, kind) = BARRIER_CYCLE[(seq % 4) as usize];
        BarrierId { round: (seq / 4) as u32, phase, kind }
    }
}

impl fmt::Display for BarrierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {:?}, {:?})", self.round, self.phase, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnGrant {
    pub round: u32,
    pub turn: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SlotState {
    Running,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSlot {
    pub agent_id: String,
    pub state: SlotState,
    pub phase: Phase,
    pub round_index: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordError {
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("agent {0:?} already registered")]
    DuplicateRegistration(String),
    #[error("agent {0:?} is not registered")]
    NotRegistered(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("stale agent: {0}")]
    StaleAgent(String),
    #[error("phase error: {0}")]
    PhaseError(String),
    #[error("coordinator unreachable: {0}")]
    Unreachable(String),
}

impl CoordError {
    pub fn code(&self) -> &'static str {
        match self {
            CoordError::UnknownAgent(_) => "UnknownAgent",
            CoordError::DuplicateRegistration(_) => "DuplicateRegistration",
            CoordError::NotRegistered(_) => "NotRegistered",
            CoordError::ProtocolViolation(_) => "ProtocolViolation",
            CoordError::StaleAgent(_) => "StaleAgent",
            CoordError::PhaseError(_) => "PhaseError",
            CoordError::Unreachable(_) => "CoordinatorUnreachable",
        }
    }

    pub fn from_code(code: &str, message: String) -> Self {
        match code {
            "UnknownAgent" => CoordError::UnknownAgent(message),
            "DuplicateRegistration" => CoordError::DuplicateRegistration(message),
            "NotRegistered" => CoordError::NotRegistered(message),
            "ProtocolViolation" => CoordError::ProtocolViolation(message),
            "StaleAgent" => CoordError::StaleAgent(message),
            "PhaseError" => CoordError::PhaseError(message),
            _ => CoordError::Unreachable(format!("{code}: {message}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Registered,
    Arrived { barrier: BarrierId },
    Released { barrier: BarrierId },
    Granted { round: u32, turn: u32 },
    Yielded { round: u32, turn: u32 },
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordEvent {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// The client-facing coordinator operations, implemented in-process and over the wire.
pub trait CoordinatorApi: Send + Sync {
    fn register(&self, agent_id: &str) -> Result<ProtocolSpec, CoordError>;
    fn arrive(&self, agent_id: &str, barrier: BarrierId) -> Result<(), CoordError>;
    fn wait_turn(&self, agent_id: &str) -> Result<TurnGrant, CoordError>;
    fn yield_turn(&self, agent_id: &str) -> Result<(), CoordError>;
}

#[derive(Debug)]
struct AgentRecord {
    slot: AgentSlot,
    next_barrier: u64,
    turns_taken: u32,
    waiting_for_turn: bool,
}

#[derive(Debug)]
struct State {
    agents: Vec<Option<AgentRecord>>,
    arrived: BTreeSet<String>,
    /// Sequence number of the barrier currently gathering arrivals.
    gathering: u64,
    /// Inside the rollout phase (between ROLLOUT ENTER and ROLLOUT EXIT releases).
    in_rollout: bool,
    round: u32,
    turn: u32,
    running: Option<usize>,
    aborted: Option<String>,
    log: Vec<CoordEvent>,
}

impl State {
    fn push(&mut self, agent: Option<&str>, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(CoordEvent { seq, agent: agent.map(str::to_string), kind });
    }
}

pub struct Coordinator {
    spec: ProtocolSpec,
    timeout: Duration,
    state: Mutex<State>,
    changed: Condvar,
}

impl Coordinator {
    pub fn new(spec: ProtocolSpec) -> Result<Self, String> {
        Coordinator::with_timeout(spec, DEFAULT_BARRIER_TIMEOUT)
    }

    pub fn with_timeout(spec: ProtocolSpec, timeout: Duration) -> Result<Self, String> {
        spec.validate()?;
        let agents = (0..spec.agents.len()).map(|_| None).collect();
        Ok(Coordinator {
            spec,
            timeout,
            state: Mutex::new(State {
                agents,
                arrived: BTreeSet::new(),
                gathering: 0,
                in_rollout: false,
                round: 0,
                turn: 0,
                running: None,
                aborted: None,
                log: Vec::new(),
            }),
            changed: Condvar::new(),
        })
    }

    pub fn spec(&self) -> &ProtocolSpec {
        &self.spec
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn events(&self) -> Vec<CoordEvent> {
        self.lock().log.clone()
    }

    pub fn slots(&self) -> Vec<AgentSlot> {
        self.lock().agents.iter().flatten().map(|r| r.slot.clone()).collect()
    }

    pub fn is_aborted(&self) -> bool {
        self.lock().aborted.is_some()
    }

    /// Grant sequence as (agent, round, turn), read from the event log.
    pub fn grant_sequence(&self) -> Vec<(String, u32, u32)> {
        self.lock()
            .log
            .iter()
            .filter_map(|e| match (&e.agent, &e.kind) {
                (Some(a), EventKind::Granted { round, turn }) => Some((a.clone(), *round, *turn)),
                _ => None,
            })
            .collect()
    }

    /// Aborts the protocol; every blocked and future call fails with `StaleAgent`.
    pub fn abort(&self, reason: &str) {
        let mut st = self.lock();
        self.abort_locked(&mut st, reason.to_string());
    }

    fn abort_locked(&self, st: &mut State, reason: String) {
        if st.aborted.is_none() {
            log::warn!("coordinator abort: {reason}");
            st.push(None, EventKind::Aborted { reason: reason.clone() });
            st.aborted = Some(reason);
            self.changed.notify_all();
        }
    }

    fn check_aborted(st: &State) -> Result<(), CoordError> {
        match &st.aborted {
            Some(r) => Err(CoordError::StaleAgent(r.clone())),
            None => Ok(()),
        }
    }

    fn index_of(&self, agent_id: &str) -> Result<usize, CoordError> {
        self.spec.position(agent_id).ok_or_else(|| CoordError::UnknownAgent(agent_id.to_string()))
    }

    fn registered(st: &State, idx: usize, agent_id: &str) -> Result<(), CoordError> {
        if st.agents[idx].is_none() {
            return Err(CoordError::NotRegistered(agent_id.to_string()));
        }
        Ok(())
    }

    /// Waits on the condition variable until `done` holds or the deadline passes.
    fn wait_until<'a>(
        &self,
        mut st: MutexGuard<'a, State>,
        deadline: Instant,
        mut done: impl FnMut(&State) -> bool,
    ) -> (MutexGuard<'a, State>, bool) {
        loop {
            if st.aborted.is_some() || done(&st) {
                return (st, true);
            }
            let now = Instant::now();
            if now >= deadline {
                return (st, false);
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn release(&self, st: &mut State, barrier: BarrierId) {
        st.arrived.clear();
        st.gathering += 1;
        match (barrier.phase, barrier.kind) {
            (Phase::Rollout, BarrierKind::Enter) => {
                st.in_rollout = true;
                st.round = barrier.round;
                st.turn = 0;
            }
            (Phase::Rollout, BarrierKind::Exit) => st.in_rollout = false,
            (Phase::Update, BarrierKind::Enter) => {
                for rec in st.agents.iter_mut().flatten() {
                    rec.slot.phase = Phase::Update;
                }
            }
            (Phase::Update, BarrierKind::Exit) => {
                for rec in st.agents.iter_mut().flatten() {
                    rec.slot.phase = Phase::Rollout;
                    rec.slot.round_index = barrier.round + 1;
                    rec.turns_taken = 0;
                }
            }
        }
        st.push(None, EventKind::Released { barrier });
        self.changed.notify_all();
    }
}

impl CoordinatorApi for Coordinator {
    fn register(&self, agent_id: &str) -> Result<ProtocolSpec, CoordError> {
        let idx = self.index_of(agent_id)?;
        let mut st = self.lock();
        Self::check_aborted(&st)?;
        if st.agents[idx].is_some() {
            return Err(CoordError::DuplicateRegistration(agent_id.to_string()));
        }
        st.agents[idx] = Some(AgentRecord {
            slot: AgentSlot {
                agent_id: agent_id.to_string(),
                state: SlotState::Pending,
                phase: Phase::Rollout,
                round_index: 0,
            },
            next_barrier: 0,
            turns_taken: 0,
            waiting_for_turn: false,
        });
        st.push(Some(agent_id), EventKind::Registered);
        self.changed.notify_all();
        Ok(self.spec.clone())
    }

    fn arrive(&self, agent_id: &str, barrier: BarrierId) -> Result<(), CoordError> {
        let idx = self.index_of(agent_id)?;
        let mut st = self.lock();
        Self::check_aborted(&st)?;
        Self::registered(&st, idx, agent_id)?;
        let seq = barrier.sequence();
        let rec = st.agents[idx].as_ref().expect("registered");
        if seq != rec.next_barrier {
            return Err(CoordError::ProtocolViolation(format!(
                "{agent_id} arrived at {barrier}, expected {}",
                BarrierId::from_sequence(rec.next_barrier)
            )));
        }
        if barrier.round >= self.spec.rounds {
            return Err(CoordError::ProtocolViolation(format!("protocol has only {} rounds", self.spec.rounds)));
        }
        if barrier.phase == Phase::Rollout
            && barrier.kind == BarrierKind::Exit
            && rec.turns_taken < self.spec.turns_for(agent_id)
        {
            return Err(CoordError::ProtocolViolation(format!(
                "{agent_id} left the rollout phase with {} of {} turns taken",
                rec.turns_taken,
                self.spec.turns_for(agent_id)
            )));
        }
        st.agents[idx].as_mut().expect("registered").next_barrier += 1;
        st.arrived.insert(agent_id.to_string());
        st.push(Some(agent_id), EventKind::Arrived { barrier });
        if st.arrived.len() == self.spec.agents.len() {
            self.release(&mut st, barrier);
            return Ok(());
        }
        let deadline = Instant::now() + self.timeout;
        let (mut st, ok) = self.wait_until(st, deadline, |s| s.gathering > seq);
        Self::check_aborted(&st)?;
        if !ok {
            let missing: Vec<_> =
                self.spec.agents.iter().filter(|a| !st.arrived.contains(*a)).cloned().collect();
            let reason = format!("barrier {barrier} timed out waiting for {missing:?}");
            self.abort_locked(&mut st, reason.clone());
            return Err(CoordError::StaleAgent(reason));
        }
        Ok(())
    }

    fn wait_turn(&self, agent_id: &str) -> Result<TurnGrant, CoordError> {
        let idx = self.index_of(agent_id)?;
        let mut st = self.lock();
        Self::check_aborted(&st)?;
        Self::registered(&st, idx, agent_id)?;
        if !st.in_rollout {
            return Err(CoordError::PhaseError(format!("{agent_id} requested a turn outside the rollout phase")));
        }
        let rec = st.agents[idx].as_ref().expect("registered");
        if st.running == Some(idx) || rec.waiting_for_turn {
            return Err(CoordError::ProtocolViolation(format!("{agent_id} already holds or awaits a grant")));
        }
        if rec.turns_taken >= self.spec.turns_for(agent_id) {
            return Err(CoordError::ProtocolViolation(format!("{agent_id} has no turns left this round")));
        }
        st.agents[idx].as_mut().expect("registered").waiting_for_turn = true;
        let n = self.spec.agents.len() as u32;
        let deadline = Instant::now() + self.timeout;
        let (mut st, ok) = self.wait_until(st, deadline, |s| {
            s.running.is_none() && s.turn < self.spec.turns_per_round && s.turn % n == idx as u32
        });
        st.agents[idx].as_mut().expect("registered").waiting_for_turn = false;
        Self::check_aborted(&st)?;
        if !ok {
            let holder = self.spec.agent_for_turn(st.turn).to_string();
            let reason = format!("turn {} of round {} not released by {holder}", st.turn, st.round);
            self.abort_locked(&mut st, reason.clone());
            return Err(CoordError::StaleAgent(reason));
        }
        let grant = TurnGrant { round: st.round, turn: st.turn };
        st.running = Some(idx);
        st.agents[idx].as_mut().expect("registered").slot.state = SlotState::Running;
        st.push(Some(agent_id), EventKind::Granted { round: grant.round, turn: grant.turn });
        Ok(grant)
    }

    fn yield_turn(&self, agent_id: &str) -> Result<(), CoordError> {
        let idx = self.index_of(agent_id)?;
        let mut st = self.lock();
        Self::check_aborted(&st)?;
        Self::registered(&st, idx, agent_id)?;
        if st.running != Some(idx) {
            return Err(CoordError::ProtocolViolation(format!("{agent_id} yielded without holding a grant")));
        }
        let (round, turn) = (st.round, st.turn);
        st.running = None;
        st.turn += 1;
        let rec = st.agents[idx].as_mut().expect("registered");
        rec.slot.state = SlotState::Pending;
        rec.turns_taken += 1;
        st.push(Some(agent_id), EventKind::Yielded { round, turn });
        self.changed.notify_all();
        Ok(())
    }
}

impl<T: CoordinatorApi + ?Sized> CoordinatorApi for std::sync::Arc<T> {
    fn register(&self, agent_id: &str) -> Result<ProtocolSpec, CoordError> {
        (**self).register(agent_id)
    }
    fn arrive(&self, agent_id: &str, barrier: BarrierId) -> Result<(), CoordError> {
        (**self).arrive(agent_id, barrier)
    }
    fn wait_turn(&self, agent_id: &str) -> Result<TurnGrant, CoordError> {
        (**self).wait_turn(agent_id)
    }
    fn yield_turn(&self, agent_id: &str) -> Result<(), CoordError> {
        (**self).yield_turn(agent_id)
    }
}

/// Checks the mutual-exclusion property of an event log: grants and yields
/// strictly alternate and no two agents ever hold a grant at once.
pub fn mutual_exclusion_violations(events: &[CoordEvent]) -> usize {
    let mut holder: Option<&str> = None;
    let mut violations = 0;
    for e in events {
        match (&e.kind, e.agent.as_deref()) {
            (EventKind::Granted { .. }, Some(a)) => {
                if holder.is_some() {
                    violations += 1;
                }
                holder = Some(a);
            }
            (EventKind::Yielded { .. }, Some(a)) => {
                if holder != Some(a) {
                    violations += 1;
                }
                holder = None;
            }
            _ => {}
        }
    }
    violations
}
