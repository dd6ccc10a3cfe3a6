//! Turn gating for two-agent games.
//!
//! A round of two-agent training plays G games at once. Each agent runs one
//! episode thread per game; those threads park at the agent's [`TurnGate`]
//! whenever the opponent is to move. Each coordinator grant opens the gate
//! once: every parked episode makes exactly one move and parks again (or
//! finishes), and only then is the grant yielded.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::env::{EnvBackend, EnvClient, EnvError, EnvKind, ResetRequest, Seat, StepRequest};
use crate::types::{EnvState, StepResult};

#[derive(Debug, Default)]
struct GateState {
    generation: u64,
    active: usize,
    parked: HashMap<u64, usize>,
    closed: bool,
}

pub struct TurnGate {
    state: Mutex<GateState>,
    changed: Condvar,
    settle_timeout: Duration,
}

impl Default for TurnGate {
    fn default() -> Self {
        TurnGate::new(Duration::from_secs(60))
    }
}

impl TurnGate {
    pub fn new(settle_timeout: Duration) -> Self {
        TurnGate { state: Mutex::default(), changed: Condvar::new(), settle_timeout }
    }

    fn lock(&self) -> MutexGuard<'_, GateState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers an episode that will park at this gate. Call before the
    /// first grant.
    pub fn enroll(&self) {
        self.lock().active += 1;
    }

    /// Marks an enrolled episode as finished.
    pub fn finish(&self) {
        let mut st = self.lock();
        st.active = st.active.saturating_sub(1);
        self.changed.notify_all();
    }

    /// Blocks until the next grant opens the gate. Fails once the gate is closed.
    pub fn park(&self) -> Result<(), EnvError> {
        let mut st = self.lock();
        if st.closed {
            return Err(EnvError::Unreachable("turn gate closed".into()));
        }
        let generation = st.generation;
        *st.parked.entry(generation).or_default() += 1;
        self.changed.notify_all();
        while st.generation == generation && !st.closed {
            st = self.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(n) = st.parked.get_mut(&generation) {
            *n -= 1;
        }
        if st.closed {
            return Err(EnvError::Unreachable("turn gate closed".into()));
        }
        Ok(())
    }

    fn settled(st: &GateState) -> bool {
        st.parked.get(&st.generation).copied().unwrap_or(0) >= st.active
    }

    fn wait_settled<'a>(&self, mut st: MutexGuard<'a, GateState>) -> Result<MutexGuard<'a, GateState>, String> {
        let deadline = Instant::now() + self.settle_timeout;
        while !Self::settled(&st) {
            let now = Instant::now();
            if now >= deadline {
                return Err(format!("{} episodes did not settle", st.active));
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
        Ok(st)
    }

    /// Lets every parked episode move once and waits until all of them have
    /// parked again or finished.
    pub fn open_and_settle(&self) -> Result<(), String> {
        let st = self.wait_settled(self.lock())?;
        let mut st = st;
        st.generation += 1;
        self.changed.notify_all();
        self.wait_settled(st).map(|_| ())
    }

    /// Releases all parked episodes with an error; used when a round ends.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn active(&self) -> usize {
        self.lock().active
    }
}

/// Environment client for one seat of two-agent games, synchronized by a gate.
///
/// `reset` joins the game and returns the board once it is this seat's turn;
/// `step` posts a move and, unless the game ended, waits for the opponent's
/// reply and returns the resulting board.
pub struct SeatClient {
    backend: Arc<dyn EnvBackend>,
    gate: Arc<TurnGate>,
    seat: Seat,
    match_id: String,
}

impl SeatClient {
    pub fn new(backend: Arc<dyn EnvBackend>, gate: Arc<TurnGate>, seat: Seat, match_id: impl Into<String>) -> Self {
        SeatClient { backend, gate, seat, match_id: match_id.into() }
    }

    fn observe(&self, episode_id: &str) -> Result<StepResult, EnvError> {
        self.backend.step(&StepRequest {
            episode_id: episode_id.to_string(),
            action_text: String::new(),
            seat: Some(self.seat),
            observe: true,
        })
    }
}

impl EnvClient for SeatClient {
    fn reset(&self, seed: u64) -> Result<(String, EnvState), EnvError> {
        let reply = self.backend.reset(&ResetRequest {
            kind: Some(EnvKind::GomokuTwoAgent),
            seed,
            seat: Some(self.seat),
            match_id: Some(self.match_id.clone()),
        })?;
        self.gate.park()?;
        let seen = self.observe(&reply.episode_id)?;
        Ok((reply.episode_id, seen.state))
    }

    fn step(&self, episode_id: &str, action_text: &str) -> Result<StepResult, EnvError> {
        let moved = self.backend.step(&StepRequest {
            episode_id: episode_id.to_string(),
            action_text: action_text.to_string(),
            seat: Some(self.seat),
            observe: false,
        })?;
        if moved.done {
            return Ok(moved);
        }
        self.gate.park()?;
        let mut seen = self.observe(episode_id)?;
        seen.info.insert("turn_count".into(), moved.info.get("turn_count").cloned().unwrap_or_default());
        Ok(seen)
    }
}
