//! In-process table of live environment instances.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde_json::{json, Map, Value};

use super::arith::ArithmeticTask;
use super::gomoku::{parse_move, GomokuState, Outcome, Seat};
use super::{EnvError, EnvKind, ResetReply, ResetRequest, StepRequest};
use crate::policy::features::mix64;
use crate::policy::{episode_rng, EpisodeRng};
use crate::types::{EnvState, StepResult};

const OPPONENT_STREAM: u64 = 0x6f70_706f_6e65_6e74;
/// Finished episode ids remembered for `EpisodeFinished` answers.
const FINISHED_MEMORY: usize = 200_000;

/// Seeded generator for the built-in opponent of one episode.
pub fn opponent_rng(seed: u64, server_seed: u64) -> EpisodeRng {
    episode_rng(mix64(seed ^ OPPONENT_STREAM).wrapping_add(mix64(server_seed)))
}

/// Uniform choice among the legal cells.
pub fn random_move<R: Rng + ?Sized>(state: &GomokuState, rng: &mut R) -> usize {
    let moves = state.legal_moves();
    moves[rng.random_range(0..moves.len())]
}

enum Game {
    Gomoku { state: GomokuState, agent: Seat, opponent: EpisodeRng },
    Arith(ArithmeticTask),
    TwoAgent { state: GomokuState, final_scores: Option<[f64; 2]>, delivered: [bool; 2] },
}

pub struct EnvInstance {
    pub episode_id: String,
    game: Game,
    pub turn_count: u32,
    pub done: bool,
}

fn info(turn_count: u32, extra: &[(&str, Value)]) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("turn_count".into(), json!(turn_count));
    for (k, v) in extra {
        m.insert((*k).to_string(), v.clone());
    }
    m
}

fn result(state: String, score: f64, done: bool, info: Map<String, Value>) -> StepResult {
    StepResult { state: EnvState::new(state), score, done, info }
}

impl EnvInstance {
    fn new(episode_id: String, kind: EnvKind, seed: u64, seat: Seat, server_seed: u64) -> Self {
        let game = match kind {
            EnvKind::Arith => Game::Arith(ArithmeticTask::from_seed(seed)),
            EnvKind::Gomoku => {
                let mut opponent = opponent_rng(seed, server_seed);
                let mut state = GomokuState::default();
                if seat == Seat::O {
                    let cell = random_move(&state, &mut opponent);
                    state.play(cell);
                }
                Game::Gomoku { state, agent: seat, opponent }
            }
            EnvKind::GomokuTwoAgent => {
                Game::TwoAgent { state: GomokuState::default(), final_scores: None, delivered: [false; 2] }
            }
        };
        EnvInstance { episode_id, game, turn_count: 0, done: false }
    }

    pub fn render(&self) -> String {
        match &self.game {
            Game::Arith(t) if !self.done => t.prompt(),
            Game::Arith(_) => "done".to_string(),
            Game::Gomoku { state, .. } | Game::TwoAgent { state, .. } => state.render(),
        }
    }

    pub fn step(&mut self, req: &StepRequest) -> Result<StepResult, EnvError> {
        if matches!(self.game, Game::TwoAgent { .. }) {
            return self.step_two_agent(req);
        }
        if self.done {
            return Err(EnvError::EpisodeFinished(self.episode_id.clone()));
        }
        if req.observe {
            return Err(EnvError::BadRequest("observe is only valid for two-agent games".into()));
        }
        self.turn_count += 1;
        let turn = self.turn_count;
        match &mut self.game {
            Game::Arith(task) => {
                let score = task.score(&req.action_text);
                self.done = true;
                Ok(result("done".into(), score, true, info(turn, &[("correct", json!(score == 1.0))])))
            }
            Game::Gomoku { state, agent, opponent } => {
                let Some(cell) = parse_move(&req.action_text).filter(|&c| state.board[c].is_none()) else {
                    self.done = true;
                    return Ok(result(state.render(), -1.0, true, info(turn, &[("reason", json!("invalid"))])));
                };
                state.play(cell);
                if let Some(outcome) = state.outcome() {
                    self.done = true;
                    let (score, reason) = if outcome == Outcome::Win(*agent) { (1.0, "win") } else { (0.0, "draw") };
                    return Ok(result(state.render(), score, true, info(turn, &[("reason", json!(reason))])));
                }
                let reply = random_move(state, opponent);
                state.play(reply);
                let extra = ("opponent_move", json!(reply + 1));
                match state.outcome() {
                    Some(Outcome::Win(_)) => {
                        self.done = true;
                        Ok(result(state.render(), -1.0, true, info(turn, &[extra, ("reason", json!("loss"))])))
                    }
                    Some(Outcome::Draw) => {
                        self.done = true;
                        Ok(result(state.render(), 0.0, true, info(turn, &[extra, ("reason", json!("draw"))])))
                    }
                    None => Ok(result(state.render(), 0.0, false, info(turn, &[extra]))),
                }
            }
            Game::TwoAgent { .. } => unreachable!(),
        }
    }

    fn step_two_agent(&mut self, req: &StepRequest) -> Result<StepResult, EnvError> {
        let seat = req.seat.ok_or_else(|| EnvError::BadRequest("two-agent step requires a seat".into()))?;
        let id = self.episode_id.clone();
        let Game::TwoAgent { state, final_scores, delivered } = &mut self.game else { unreachable!() };
        let me = seat.index();
        if req.observe || final_scores.is_some() {
            let mut score = 0.0;
            let mut reason = None;
            if let Some(scores) = final_scores {
                if delivered[me] && !req.observe {
                    return Err(EnvError::EpisodeFinished(id));
                }
                if !delivered[me] {
                    delivered[me] = true;
                    score = scores[me];
                    reason = Some("opponent_ended");
                }
            }
            let done = final_scores.is_some();
            self.done = delivered.iter().all(|d| *d);
            let mut extra = vec![("seat", json!(seat))];
            if let Some(r) = reason {
                extra.push(("reason", json!(r)));
            }
            return Ok(result(state.render(), score, done, info(self.turn_count, &extra)));
        }
        if state.to_move != seat {
            return Err(EnvError::NotYourTurn { episode: id, seat });
        }
        self.turn_count += 1;
        let turn = self.turn_count;
        let (scores, reason) = match parse_move(&req.action_text).filter(|&c| state.board[c].is_none()) {
            None => {
                let mut s = [1.0; 2];
                s[me] = -1.0;
                (Some(s), "invalid")
            }
            Some(cell) => {
                state.play(cell);
                match state.outcome() {
                    Some(Outcome::Win(w)) => {
                        let mut s = [-1.0; 2];
                        s[w.index()] = 1.0;
                        (Some(s), "win")
                    }
                    Some(Outcome::Draw) => (Some([0.0; 2]), "draw"),
                    None => (None, ""),
                }
            }
        };
        match scores {
            Some(s) => {
                *final_scores = Some(s);
                delivered[me] = true;
                Ok(result(state.render(), s[me], true, info(turn, &[("seat", json!(seat)), ("reason", json!(reason))])))
            }
            None => Ok(result(state.render(), 0.0, false, info(turn, &[("seat", json!(seat))]))),
        }
    }
}

/// Live instances keyed by episode id. Each instance is stepped under its own
/// lock, so distinct episodes progress in parallel while steps of one episode
/// are serialized.
pub struct EnvHost {
    kinds: Vec<EnvKind>,
    default_kind: EnvKind,
    server_seed: u64,
    instances: Mutex<HashMap<String, Arc<Mutex<EnvInstance>>>>,
    finished: Mutex<(HashSet<String>, VecDeque<String>)>,
    next_id: AtomicU64,
}

impl EnvHost {
    pub fn new(default_kind: EnvKind) -> Self {
        EnvHost::with_kinds(default_kind, &[EnvKind::Gomoku, EnvKind::GomokuTwoAgent, EnvKind::Arith], 0)
    }

    pub fn with_kinds(default_kind: EnvKind, kinds: &[EnvKind], server_seed: u64) -> Self {
        EnvHost {
            kinds: kinds.to_vec(),
            default_kind,
            server_seed,
            instances: Mutex::default(),
            finished: Mutex::default(),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn live_instances(&self) -> usize {
        self.instances.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn reset(&self, req: &ResetRequest) -> Result<ResetReply, EnvError> {
        let kind = req.kind.unwrap_or(self.default_kind);
        if !self.kinds.contains(&kind) {
            return Err(EnvError::UnsupportedEnv(kind.to_string()));
        }
        let mut table = self.instances.lock().unwrap_or_else(|p| p.into_inner());
        let (id, seat) = match kind {
            EnvKind::GomokuTwoAgent => {
                let seat = req.seat.ok_or_else(|| EnvError::BadRequest("two-agent reset requires a seat".into()))?;
                let id = format!("{}-{}", req.match_id.as_deref().unwrap_or("match"), req.seed);
                if let Some(inst) = table.get(&id) {
                    let inst = inst.lock().unwrap_or_else(|p| p.into_inner());
                    return Ok(ResetReply { episode_id: id, state: inst.render() });
                }
                (id, seat)
            }
            _ => {
                let n = self.next_id.fetch_add(1, Ordering::Relaxed);
                (format!("{kind}-{}-{n}", req.seed), req.seat.unwrap_or(Seat::X))
            }
        };
        let inst = EnvInstance::new(id.clone(), kind, req.seed, seat, self.server_seed);
        let state = inst.render();
        table.insert(id.clone(), Arc::new(Mutex::new(inst)));
        Ok(ResetReply { episode_id: id, state })
    }

    pub fn step(&self, req: &StepRequest) -> Result<StepResult, EnvError> {
        let inst = self.instances.lock().unwrap_or_else(|p| p.into_inner()).get(&req.episode_id).cloned();
        let Some(inst) = inst else {
            let finished = self.finished.lock().unwrap_or_else(|p| p.into_inner());
            return Err(if finished.0.contains(&req.episode_id) {
                EnvError::EpisodeFinished(req.episode_id.clone())
            } else {
                EnvError::UnknownEpisode(req.episode_id.clone())
            });
        };
        let mut guard = inst.lock().unwrap_or_else(|p| p.into_inner());
        let out = guard.step(req)?;
        if guard.done {
            drop(guard);
            self.retire(&req.episode_id);
        }
        Ok(out)
    }

    fn retire(&self, id: &str) {
        self.instances.lock().unwrap_or_else(|p| p.into_inner()).remove(id);
        let mut finished = self.finished.lock().unwrap_or_else(|p| p.into_inner());
        if finished.0.insert(id.to_string()) {
            finished.1.push_back(id.to_string());
            while finished.1.len() > FINISHED_MEMORY {
                if let Some(old) = finished.1.pop_front() {
                    finished.0.remove(&old);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reset(host: &EnvHost, kind: EnvKind, seed: u64) -> ResetReply {
        host.reset(&ResetRequest { kind: Some(kind), seed, seat: None, match_id: None }).unwrap()
    }

    fn step(host: &EnvHost, id: &str, action: &str) -> Result<StepResult, EnvError> {
        host.step(&StepRequest { episode_id: id.into(), action_text: action.into(), seat: None, observe: false })
    }

    #[test]
    fn arith_episode() {
        let host = EnvHost::new(EnvKind::Arith);
        let r = reset(&host, EnvKind::Arith, 43);
        assert_eq!(r.state, "3+4=");
        assert_eq!(reset(&host, EnvKind::Arith, 43).state, "3+4=");
        let out = step(&host, &r.episode_id, "7").unwrap();
        assert_eq!((out.state.text.as_str(), out.score, out.done), ("done", 1.0, true));
        assert!(matches!(step(&host, &r.episode_id, "7"), Err(EnvError::EpisodeFinished(_))));
        assert!(matches!(step(&host, "nope", "7"), Err(EnvError::UnknownEpisode(_))));
    }

    #[test]
    fn gomoku_initial_and_invalid() {
        let host = EnvHost::new(EnvKind::Gomoku);
        let r = reset(&host, EnvKind::Gomoku, 0);
        assert_eq!(r.state, "X to move\n...\n...\n...\n");
        let out = step(&host, &r.episode_id, "abc").unwrap();
        assert_eq!((out.score, out.done), (-1.0, true));
        assert_eq!(out.info["reason"], "invalid");
    }

    #[test]
    fn gomoku_occupied_cell_is_invalid() {
        let host = EnvHost::new(EnvKind::Gomoku);
        let r = reset(&host, EnvKind::Gomoku, 3);
        let first = step(&host, &r.episode_id, "5").unwrap();
        assert!(!first.done);
        let taken = first.info["opponent_move"].as_u64().unwrap();
        let out = step(&host, &r.episode_id, &taken.to_string()).unwrap();
        assert_eq!((out.score, out.done), (-1.0, true));
        assert_eq!(out.info["reason"], "invalid");
    }

    #[test]
    fn unsupported_kind() {
        let host = EnvHost::with_kinds(EnvKind::Arith, &[EnvKind::Arith], 0);
        let err = host.reset(&ResetRequest { kind: Some(EnvKind::Gomoku), seed: 0, seat: None, match_id: None });
        assert!(matches!(err, Err(EnvError::UnsupportedEnv(_))));
    }

    #[test]
    fn two_agent_game_is_zero_sum() {
        let host = EnvHost::new(EnvKind::GomokuTwoAgent);
        let join = |seat| {
            host.reset(&ResetRequest { kind: Some(EnvKind::GomokuTwoAgent), seed: 5, seat: Some(seat), match_id: None })
                .unwrap()
        };
        let x = join(Seat::X);
        let o = join(Seat::O);
        assert_eq!(x.episode_id, o.episode_id);
        let id = x.episode_id;
        let mv = |seat, a: &str| {
            host.step(&StepRequest { episode_id: id.clone(), action_text: a.into(), seat: Some(seat), observe: false })
        };
        assert!(matches!(mv(Seat::O, "1"), Err(EnvError::NotYourTurn { .. })));
        let mut totals = [0.0; 2];
        for (seat, a) in [(Seat::X, "1"), (Seat::O, "4"), (Seat::X, "2"), (Seat::O, "5")] {
            let r = mv(seat, a).unwrap();
            totals[seat.index()] += r.score;
            assert!(!r.done);
        }
        let win = mv(Seat::X, "3").unwrap();
        assert_eq!((win.score, win.done), (1.0, true));
        totals[0] += win.score;
        let seen = host
            .step(&StepRequest { episode_id: id.clone(), action_text: String::new(), seat: Some(Seat::O), observe: true })
            .unwrap();
        assert_eq!((seen.score, seen.done), (-1.0, true));
        totals[1] += seen.score;
        assert_eq!(totals[0] + totals[1], 0.0);
        assert!(matches!(mv(Seat::O, "9"), Err(EnvError::EpisodeFinished(_))));
    }
}
