use std::time::{Duration, Instant};

use super::{BarrierId, BarrierKind, CoordError, CoordinatorApi, Phase, ProtocolSpec, TurnGrant};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats<U> {
    pub round: u32,
    pub grants: Vec<TurnGrant>,
    pub update: U,
    pub elapsed: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum RoundError<E> {
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error("agent work failed: {0}")]
    Work(E),
}

/// Runs one protocol round for `agent_id`: enter the rollout phase, take
/// every turn the agent is owed (calling `rollout` while holding each grant),
/// exit, then run `update` between the update barriers.
pub fn run_round<C, U, E>(
    coord: &C,
    spec: &ProtocolSpec,
    agent_id: &str,
    round: u32,
    mut rollout: impl FnMut(TurnGrant) -> Result<(), E>,
    update: impl FnOnce() -> Result<U, E>,
) -> Result<RoundStats<U>, RoundError<E>>
where
    C: CoordinatorApi + ?Sized,
{
    let start = Instant::now();
    coord.arrive(agent_id, BarrierId::new(round, Phase::Rollout, BarrierKind::Enter))?;
    let mut grants = Vec::new();
    for _ in 0..spec.turns_for(agent_id) {
        let grant = coord.wait_turn(agent_id)?;
        grants.push(grant);
        let outcome = rollout(grant);
        // release even on failure so the peer is not left waiting on a dead grant
        coord.yield_turn(agent_id)?;
        outcome.map_err(RoundError::Work)?;
    }
    coord.arrive(agent_id, BarrierId::new(round, Phase::Rollout, BarrierKind::Exit))?;
    coord.arrive(agent_id, BarrierId::new(round, Phase::Update, BarrierKind::Enter))?;
    let update = update().map_err(RoundError::Work)?;
    coord.arrive(agent_id, BarrierId::new(round, Phase::Update, BarrierKind::Exit))?;
    Ok(RoundStats { round, grants, update, elapsed: start.elapsed() })
}
