//! Measurements shared by the oracle tests and the acceptance suite. Each
//! function returns what it measured; callers decide the thresholds.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

use rlaas::coordinator::{
    mutual_exclusion_violations, run_round, CoordEvent, Coordinator, CoordinatorApi, EventKind, ProtocolSpec,
};
use rlaas::env::{EnvBackend, EnvClient, EnvHost, EnvKind, KindClient};
use rlaas::fsm::{run_episode, Mode, RolloutConfig};
use rlaas::policy::{episode_rng, update, EpisodeRng, PolicyParams, TouchedToken, UpdateOptions};
use rlaas::protocol::{self, Kind, Message, MessageKind};
use rlaas::scheduler::{start_scheduler, HeartbeatSource, SchedulerConfig};
use rlaas::task_server::{GenerateRequest, TaskServer, TaskSettings};
use rlaas::types::{JobSpec, JobStatus, JobType, Segment, SegmentSource, TerminationReason, Token, Trajectory};

pub fn rng(seed: u64) -> EpisodeRng {
    episode_rng(seed)
}

pub fn tok(v: u8) -> Token {
    Token::new(v).unwrap()
}

// ---------------------------------------------------------------- gradients

/// `sum_i A_i * sum over action tokens of log p(token | prefix)`.
pub fn group_objective(params: &PolicyParams, group: &[Trajectory], advantages: &[f64]) -> f64 {
    let mut total = 0.0;
    for (t, a) in group.iter().zip(advantages) {
        let mut ctx = Vec::new();
        for seg in &t.segments {
            for &x in &seg.tokens {
                if seg.source == SegmentSource::Action {
                    total += a * params.probabilities(&ctx)[x.index()].ln();
                }
                ctx.push(x);
            }
        }
    }
    total
}

/// A small random policy and group over a reduced vocabulary.
pub fn gradient_fixture(r: &mut EpisodeRng) -> (PolicyParams, Vec<Trajectory>) {
    let vocab = r.random_range(3..=8);
    let mut params = PolicyParams::with_vocab(r.random_range(1..=4), vocab);
    params.temperature = r.random_range(0.5..2.0);
    let seg = |r: &mut EpisodeRng, source, lo, hi, turn| Segment {
        source,
        tokens: (0..r.random_range(lo..=hi)).map(|_| tok(r.random_range(0..vocab as u8))).collect(),
        turn_index: turn,
    };
    let n = r.random_range(2..=5);
    let mut group = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = Trajectory::new(format!("fx-{i}"));
        t.segments.push(seg(r, SegmentSource::Context, 1, 4, 0));
        for turn in 0..r.random_range(1..=3u32) {
            t.segments.push(seg(r, SegmentSource::Action, 1, 3, turn));
            let obs = seg(r, SegmentSource::Observation, 0, 3, turn);
            if !obs.tokens.is_empty() {
                t.segments.push(obs);
            }
            t.turn_rewards.insert(turn, r.random_range(-1.0..1.0));
        }
        t.terminated = true;
        t.termination_reason = Some(TerminationReason::EnvDone);
        group.push(t);
    }
    let contexts: Vec<Vec<Token>> = group
        .iter()
        .flat_map(|t| {
            let all = t.tokens();
            (0..=all.len()).map(move |k| all[..k].to_vec())
        })
        .collect();
    for ctx in &contexts {
        for b in params.features(ctx) {
            for t in 0..vocab as u8 {
                if r.random_bool(0.7) {
                    params.set_weight(b, tok(t), r.random_range(-1.5..1.5));
                }
            }
        }
    }
    (params, group)
}

/// Relative error (2-norm) between the update's implied gradient and central
/// finite differences of [`group_objective`] over every weight the group can reach.
pub fn gradient_relative_error(params: &PolicyParams, group: &[Trajectory]) -> f64 {
    let lr = 1.0;
    let (next, stats) = update(params, group, UpdateOptions::new(lr)).unwrap();
    let mut buckets = BTreeSet::new();
    for t in group {
        let all = t.tokens();
        for k in 0..=all.len() {
            buckets.extend(params.features(&all[..k]));
        }
    }
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for &b in &buckets {
        for v in 0..params.vocab_size() as u8 {
            let w = params.weight(b, tok(v));
            let analytic = (next.weight(b, tok(v)) - w) / lr;
            let mut p = params.clone();
            p.set_weight(b, tok(v), w + h);
            let up = group_objective(&p, group, &stats.advantages);
            p.set_weight(b, tok(v), w - h);
            let down = group_objective(&p, group, &stats.advantages);
            let fd = (up - down) / (2.0 * h);
            diff += (analytic - fd).powi(2);
            norm += fd.powi(2);
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

pub fn gradient_oracle(fixtures: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..fixtures)
        .map(|_| {
            let (p, g) = gradient_fixture(&mut r);
            gradient_relative_error(&p, &g)
        })
        .collect()
}

// ---------------------------------------------------------------- protocol

fn random_string(r: &mut EpisodeRng) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '\n', '\r', '\t', '\u{0}', '\u{7f}', 'é', '€', '😀', '{', '}'];
    (0..r.random_range(0..12)).map(|_| *POOL.choose(r).unwrap()).collect()
}

fn random_value(r: &mut EpisodeRng, depth: u32) -> Value {
    match r.random_range(0..if depth == 0 { 6 } else { 8 }) {
        0 => Value::Null,
        1 => json!(r.random_bool(0.5)),
        2 => json!(r.random::<i64>()),
        3 => json!(r.random::<u64>()),
        4 => json!(r.random_range(-1e12..1e12) * if r.random_bool(0.2) { 1e-300 } else { 1.0 }),
        5 => json!(random_string(r)),
        6 => Value::Array((0..r.random_range(0..4)).map(|_| random_value(r, depth - 1)).collect()),
        _ => Value::Object(random_object(r, depth - 1)),
    }
}

fn random_object(r: &mut EpisodeRng, depth: u32) -> Map<String, Value> {
    (0..r.random_range(0..5)).map(|_| (random_string(r), random_value(r, depth))).collect()
}

pub fn random_message(r: &mut EpisodeRng) -> Message {
    let mk = *MessageKind::ALL.choose(r).unwrap();
    let kind = match r.random_range(0..4) {
        0 => Kind::Request(mk),
        1 => Kind::Ok(mk),
        2 => Kind::Err(mk),
        _ => Kind::ProtocolErr,
    };
    let mut payload = random_object(r, 3);
    match kind {
        Kind::Request(k) => {
            for f in k.required_fields() {
                payload.insert(f.to_string(), random_value(r, 2));
            }
        }
        Kind::Err(_) | Kind::ProtocolErr => {
            payload.insert("error".into(), json!(random_string(r)));
        }
        Kind::Ok(_) => {}
    }
    Message { id: r.random(), kind, payload }
}

/// Deliberately broken encodings of `m`; every one must fail to decode.
pub fn malformed_frames(m: &Message, r: &mut EpisodeRng) -> Vec<Vec<u8>> {
    let good = protocol::encode(m).unwrap();
    let body = &good[..good.len() - 1];
    let framed = |b: &[u8]| [b, b"\n"].concat();
    let mut wire = json!({"id": m.id, "kind": m.kind.to_string(), "payload": m.payload});
    let mut out = vec![
        body.to_vec(),
        framed(&body[..r.random_range(1..body.len())]),
        {
            let mut b = good.clone();
            b.insert(r.random_range(1..body.len()), b'\n');
            b
        },
        {
            let mut b = body.to_vec();
            b.insert(r.random_range(1..body.len()), 0xff);
            framed(&b)
        },
        b"\n".to_vec(),
        framed(b"[1,2,3]"),
    ];
    for key in ["id", "kind", "payload"] {
        let mut w = wire.clone();
        w.as_object_mut().unwrap().remove(key);
        out.push(framed(&serde_json::to_vec(&w).unwrap()));
    }
    for (key, bad) in [("id", json!(-1)), ("id", json!("7")), ("kind", json!("no_such_kind")), ("payload", json!([]))] {
        let mut w = wire.clone();
        w[key] = bad;
        out.push(framed(&serde_json::to_vec(&w).unwrap()));
    }
    let drop_key = match m.kind {
        Kind::Request(k) => k.required_fields().first().copied(),
        Kind::Err(_) | Kind::ProtocolErr => Some("error"),
        Kind::Ok(_) => None,
    };
    if let Some(k) = drop_key {
        wire["payload"].as_object_mut().unwrap().remove(k);
        out.push(framed(&serde_json::to_vec(&wire).unwrap()));
    }
    out
}

#[derive(Debug, Default)]
pub struct ProtocolTally {
    pub messages: usize,
    pub round_trip_failures: usize,
    pub malformed: usize,
    /// Malformed frames that decoded without error.
    pub silent_accepts: usize,
}

pub fn protocol_round_trip(n: usize, seed: u64) -> ProtocolTally {
    let mut r = rng(seed);
    let mut tally = ProtocolTally::default();
    for _ in 0..n {
        let m = random_message(&mut r);
        tally.messages += 1;
        let ok = protocol::encode(&m).ok().and_then(|b| protocol::decode(&b).ok()).is_some_and(|d| d == m);
        if !ok {
            tally.round_trip_failures += 1;
        }
        for f in malformed_frames(&m, &mut r) {
            tally.malformed += 1;
            if protocol::decode(&f).is_ok() {
                tally.silent_accepts += 1;
            }
        }
    }
    tally
}

// ---------------------------------------------------------------- policies and rollouts

/// The task server's warm-start policy for `kind` (window 12).
pub fn prior_policy(kind: EnvKind) -> PolicyParams {
    let spec = JobSpec::new(JobType::Rl)
        .with_param("env_kind", kind.as_str())
        .with_param("format_prior", true)
        .with_param("context_window", 12);
    let settings = TaskSettings::from_spec("prior", &spec).unwrap();
    let server = TaskServer::new(settings, Arc::new(EnvHost::new(kind)), None, None).unwrap();
    (*server.params()).clone()
}

pub fn client(kind: EnvKind) -> KindClient {
    KindClient::new(Arc::new(EnvHost::new(kind)), kind)
}

/// Positions of action tokens in the flattened sequence.
pub fn action_positions(t: &Trajectory) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    for seg in &t.segments {
        for _ in &seg.tokens {
            if seg.source == SegmentSource::Action {
                out.push(pos);
            }
            pos += 1;
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MaskTally {
    pub episodes: usize,
    pub action_tokens: usize,
    pub other_tokens: usize,
    pub violations: usize,
}

/// Runs randomized episodes in groups, updates with tracing, and checks that
/// the set of positions receiving gradient is exactly the action positions,
/// and that the applied update equals the gradient of the action-only objective.
pub fn mask_soundness(episodes: usize, seed: u64) -> MaskTally {
    let mut r = rng(seed);
    let policies = [(EnvKind::Gomoku, prior_policy(EnvKind::Gomoku)), (EnvKind::Arith, prior_policy(EnvKind::Arith))];
    let mut tally = MaskTally::default();
    while tally.episodes < episodes {
        let (kind, base) = &policies[r.random_range(0..2)];
        let env = client(*kind);
        let cfg = RolloutConfig { max_turns: r.random_range(1..=6), max_action_tokens: r.random_range(1..=4), ..Default::default() };
        let n = r.random_range(2..=8).min(episodes - tally.episodes).max(2);
        let group: Vec<_> = (0..n).map(|_| run_episode(base, &env, &cfg.clone().with_seed(r.random())).unwrap()).collect();
        tally.episodes += n;
        let opts = UpdateOptions { trace: true, ..UpdateOptions::new(1.0) };
        let (next, stats) = update(base, &group, opts).unwrap();
        let touched: HashSet<TouchedToken> = stats.touched.unwrap().into_iter().collect();
        let mut expected = HashSet::new();
        for (i, t) in group.iter().enumerate() {
            let report = rlaas::fsm::mask_report(t);
            tally.action_tokens += report.action_tokens;
            tally.other_tokens += report.context_tokens + report.observation_tokens;
            if stats.advantages[i] != 0.0 {
                expected.extend(action_positions(t).into_iter().map(|position| TouchedToken { trajectory: i, position }));
            }
        }
        tally.violations += touched.symmetric_difference(&expected).count();
        // the applied step must be the analytic gradient of the action-only objective
        let mut reference: BTreeMap<(u16, u8), f64> = BTreeMap::new();
        for (t, a) in group.iter().zip(&stats.advantages) {
            let all = t.tokens();
            for p in action_positions(t) {
                let probs = base.probabilities(&all[..p]);
                for b in base.features(&all[..p]) {
                    for (v, q) in probs.iter().enumerate() {
                        let ind = if v == all[p].index() { 1.0 } else { 0.0 };
                        *reference.entry((b, v as u8)).or_default() += a * (ind - q) / base.temperature;
                    }
                }
            }
        }
        let mut moved: BTreeMap<(u16, u8), f64> = BTreeMap::new();
        for (b, v, w) in next.nonzero() {
            moved.insert((b, v), w - base.weight(b, tok(v)));
        }
        for (b, v, w) in base.nonzero() {
            moved.entry((b, v)).or_insert(next.weight(b, tok(v)) - w);
        }
        let keys: BTreeSet<_> = moved.keys().chain(reference.keys()).copied().collect();
        for k in keys {
            let (got, want) = (moved.get(&k).copied().unwrap_or(0.0), reference.get(&k).copied().unwrap_or(0.0));
            if (got - want).abs() > 1e-9 * (1.0 + want.abs()) {
                tally.violations += 1;
            }
        }
    }
    tally
}

/// Seeds whose TRAIN and INFERENCE trajectories serialize differently.
pub fn parity_mismatches(seeds: u64) -> Vec<u64> {
    let cases = [(EnvKind::Gomoku, prior_policy(EnvKind::Gomoku)), (EnvKind::Arith, prior_policy(EnvKind::Arith))];
    let mut bad = Vec::new();
    for seed in 0..seeds {
        let (kind, params) = &cases[(seed % 2) as usize];
        let env = client(*kind);
        let train = RolloutConfig { mode: Mode::Train, ..RolloutConfig::default().with_seed(seed) };
        let infer = RolloutConfig { mode: Mode::Inference, ..train.clone() };
        let a = serde_json::to_vec(&run_episode(params, &env, &train).unwrap()).unwrap();
        let b = serde_json::to_vec(&run_episode(params, &env, &infer).unwrap()).unwrap();
        if a != b {
            bad.push(seed);
        }
    }
    bad
}

// ---------------------------------------------------------------- gomoku referee

const LINES: [[usize; 3]; 8] = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [0, 3, 6], [1, 4, 7], [2, 5, 8], [0, 4, 8], [2, 4, 6]];

/// 0 empty, 1 X, 2 O. Checks every line by brute force.
pub fn referee_winner(board: &[u8; 9]) -> u8 {
    for l in LINES {
        if board[l[0]] != 0 && board[l[0]] == board[l[1]] && board[l[1]] == board[l[2]] {
            return board[l[0]];
        }
    }
    0
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RefereeTally {
    pub games: usize,
    pub x_wins: usize,
    pub o_wins: usize,
    pub draws: usize,
}

impl RefereeTally {
    pub fn x_win_rate(&self) -> f64 {
        self.x_wins as f64 / self.games as f64
    }
}

/// Uniform-random versus uniform-random, refereed independently of the library.
pub fn random_vs_random(games: usize, seed: u64) -> RefereeTally {
    let mut r = rng(seed);
    let mut t = RefereeTally { games, ..Default::default() };
    for _ in 0..games {
        let mut board = [0u8; 9];
        let mut mover = 1;
        loop {
            let empty: Vec<usize> = (0..9).filter(|&i| board[i] == 0).collect();
            board[*empty.choose(&mut r).unwrap()] = mover;
            match referee_winner(&board) {
                1 => t.x_wins += 1,
                2 => t.o_wins += 1,
                _ if empty.len() == 1 => t.draws += 1,
                _ => {
                    mover = 3 - mover;
                    continue;
                }
            }
            break;
        }
    }
    t
}

fn parse_board(state: &str) -> [u8; 9] {
    let cells: Vec<u8> = state
        .lines()
        .skip(1)
        .flat_map(|l| l.chars())
        .map(|c| match c {
            'X' => 1,
            'O' => 2,
            _ => 0,
        })
        .collect();
    cells.try_into().expect("three rows of three")
}

#[derive(Debug, Default)]
pub struct OpponentTally {
    pub games: usize,
    pub opponent_moves: usize,
    pub illegal: usize,
    pub score_disagreements: usize,
}

/// Plays random legal agent moves against the environment's opponent and
/// audits every reply and final score with the referee.
pub fn opponent_legality(games: usize, seed: u64) -> OpponentTally {
    let host = EnvHost::new(EnvKind::Gomoku);
    let env = KindClient::new(Arc::new(host), EnvKind::Gomoku);
    let mut r = rng(seed);
    let mut t = OpponentTally { games, ..Default::default() };
    for g in 0..games as u64 {
        let (id, state) = env.reset(seed.wrapping_mul(1_000_003).wrapping_add(g)).unwrap();
        let mut board = parse_board(&state.text);
        loop {
            let empty: Vec<usize> = (0..9).filter(|&i| board[i] == 0).collect();
            let cell = *empty.choose(&mut r).unwrap();
            board[cell] = 1;
            let res = env.step(&id, &(cell + 1).to_string()).unwrap();
            let after = parse_board(&res.state.text);
            if let Some(m) = res.info.get("opponent_move").and_then(Value::as_u64) {
                t.opponent_moves += 1;
                let c = m as usize - 1;
                if board[c] != 0 || referee_winner(&board) != 0 {
                    t.illegal += 1;
                }
                board[c] = 2;
            }
            if after != board {
                t.illegal += 1;
                board = after;
            }
            let expected = match referee_winner(&board) {
                1 => Some(1.0),
                2 => Some(-1.0),
                _ if board.iter().all(|&c| c != 0) => Some(0.0),
                _ => None,
            };
            if expected.is_some() != res.done || expected.is_some_and(|e| e != res.score) {
                t.score_disagreements += 1;
            }
            if res.done {
                break;
            }
        }
    }
    t
}

/// Episodes run concurrently on one shared host against a sequential run on a fresh host.
pub fn parallel_env_mismatches(kind: EnvKind, episodes: u64) -> usize {
    let params = prior_policy(kind);
    let cfg = RolloutConfig::default();
    let sequential: Vec<_> = {
        let env = client(kind);
        (0..episodes).map(|s| run_episode(&params, &env, &cfg.clone().with_seed(s)).unwrap()).collect()
    };
    let shared = client(kind);
    let parallel: Vec<_> = thread::scope(|sc| {
        let hs: Vec<_> = (0..episodes)
            .map(|s| {
                let (p, env, cfg) = (&params, &shared, &cfg);
                sc.spawn(move || run_episode(p, env, &cfg.clone().with_seed(s)).unwrap())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    sequential.iter().zip(&parallel).filter(|(a, b)| a != b).count()
}

// ---------------------------------------------------------------- learning runs

pub fn task_server(spec: JobSpec, store: Option<&Path>) -> TaskServer {
    let settings = TaskSettings::from_spec("acceptance", &spec).unwrap();
    let env: Arc<dyn EnvBackend> = Arc::new(EnvHost::new(settings.env_kind));
    let store = store.map(|p| rlaas::policy::CheckpointStore::open(p).unwrap());
    TaskServer::new(settings, env, store, None).unwrap()
}

#[derive(Debug, Clone)]
pub struct LearningRun {
    pub seed: u64,
    pub start: f64,
    pub end: f64,
    pub elapsed: Duration,
}

/// Greedy validation accuracy (fraction of returns >= 1) before and after `steps`.
pub fn learning_run(spec: JobSpec, steps: u64) -> LearningRun {
    let seed = spec.hyperparameters.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let t0 = Instant::now();
    let server = task_server(spec, None);
    let start = server.validate(None, None).unwrap().win_rate;
    for _ in 0..steps {
        server.train_step(None, None).unwrap();
    }
    let end = server.validate(None, None).unwrap().win_rate;
    LearningRun { seed, start, end, elapsed: t0.elapsed() }
}

#[derive(Debug)]
pub struct TwoAgentRun {
    pub rounds: u32,
    /// Per agent: win rate against the random opponent at round 0 and at `check_round`.
    pub early: [(f64, f64); 2],
    pub games: usize,
    pub zero_sum_violations: usize,
    pub alternation_violations: usize,
    pub mutual_exclusion_violations: usize,
    pub elapsed: Duration,
}

/// Two in-process agents sharing one two-agent gomoku host and one coordinator.
pub fn two_agent_run(rounds: u32, check_round: u32, seed: u64) -> TwoAgentRun {
    let t0 = Instant::now();
    let agents = ["agent_1", "agent_2"];
    let env: Arc<dyn EnvBackend> = Arc::new(EnvHost::new(EnvKind::GomokuTwoAgent));
    // a 3x3 game lasts at most nine moves
    let coord = Arc::new(Coordinator::new(ProtocolSpec::new(&agents, 9, rounds)).unwrap());
    let servers: Vec<Arc<TaskServer>> = agents
        .iter()
        .zip(["X", "O"])
        .map(|(agent, seat)| {
            let spec = JobSpec::new(JobType::Rl)
                .with_param("env_kind", "gomoku2")
                .with_param("agent_id", *agent)
                .with_param("seat", seat)
                .with_param("seed", seed)
                .with_param("group_size", 128)
                .with_param("learning_rate", 0.003)
                .with_param("context_window", 12)
                .with_param("format_prior", true)
                .with_param("validation_episodes", 500);
            let settings = TaskSettings::from_spec(agent, &spec).unwrap();
            let coord: Arc<dyn CoordinatorApi> = coord.clone();
            Arc::new(TaskServer::new(settings, env.clone(), None, Some(coord)).unwrap())
        })
        .collect();
    let runs: Vec<_> = servers
        .iter()
        .cloned()
        .map(|s| {
            thread::spawn(move || {
                let before = s.validate(None, None).unwrap().win_rate;
                let mut at_check = before;
                let mut games = Vec::new();
                for r in 0..rounds {
                    let rep = s.train_step(None, None).unwrap();
                    games.push(rep.game_returns.unwrap_or_default());
                    if r + 1 == check_round {
                        at_check = s.validate(None, None).unwrap().win_rate;
                    }
                }
                ((before, at_check), games)
            })
        })
        .collect();
    let out: Vec<_> = runs.into_iter().map(|h| h.join().unwrap()).collect();
    let (mut games, mut zero_sum_violations) = (0, 0);
    for (a, b) in out[0].1.iter().zip(&out[1].1) {
        for (k, x) in a {
            if let Some(y) = b.get(k) {
                games += 1;
                if x + y != 0.0 {
                    zero_sum_violations += 1;
                }
            }
        }
    }
    let events = coord.events();
    let grants = coord.grant_sequence();
    let alternation_violations = grants
        .iter()
        .enumerate()
        .filter(|(i, (agent, round, turn))| {
            *round as usize != i / 9 || *turn as usize != i % 9 || agent != agents[i % 9 % 2]
        })
        .count()
        + usize::from(grants.len() != rounds as usize * 9);
    TwoAgentRun {
        rounds,
        early: [out[0].0, out[1].0],
        games,
        zero_sum_violations,
        alternation_violations,
        mutual_exclusion_violations: mutual_exclusion_violations(&events),
        elapsed: t0.elapsed(),
    }
}

// ---------------------------------------------------------------- barriers

#[derive(Debug)]
pub struct BarrierRep {
    pub grants: Vec<(String, u32, u32)>,
    pub atomicity_violations: usize,
}

/// Arrivals at a barrier before the previous one released, releases before
/// every agent arrived, and agent work that overlaps a phase boundary.
fn log_atomicity_violations(events: &[CoordEvent], agents: usize) -> usize {
    let mut released: BTreeSet<u64> = BTreeSet::new();
    let mut arrived: BTreeMap<u64, usize> = BTreeMap::new();
    let mut bad = 0;
    for e in events {
        match &e.kind {
            EventKind::Arrived { barrier } => {
                let s = barrier.sequence();
                if s > 0 && !released.contains(&(s - 1)) {
                    bad += 1;
                }
                *arrived.entry(s).or_default() += 1;
            }
            EventKind::Released { barrier } => {
                let s = barrier.sequence();
                if arrived.get(&s).copied().unwrap_or(0) != agents {
                    bad += 1;
                }
                released.insert(s);
            }
            _ => {}
        }
    }
    bad
}

/// One two-agent, four-turn round with random delays everywhere an agent does work.
pub fn barrier_rep(seed: u64, max_delay_ms: u64) -> BarrierRep {
    let agents = ["agent_1", "agent_2"];
    let spec = ProtocolSpec::new(&agents, 4, 1);
    let coord = Arc::new(Coordinator::new(spec.clone()).unwrap());
    let clock = AtomicU64::new(0);
    // (agent, phase, start tick, end tick)
    let work: Mutex<Vec<(usize, u8, u64, u64)>> = Mutex::new(Vec::new());
    thread::scope(|sc| {
        for (i, agent) in agents.iter().enumerate() {
            let (coord, spec, clock, work) = (&coord, &spec, &clock, &work);
            sc.spawn(move || {
                let r = RefCell::new(rng(seed.wrapping_mul(31).wrapping_add(i as u64)));
                let nap = || thread::sleep(Duration::from_millis(r.borrow_mut().random_range(0..=max_delay_ms)));
                let timed = |phase: u8| {
                    let start = clock.fetch_add(1, Ordering::SeqCst);
                    nap();
                    let end = clock.fetch_add(1, Ordering::SeqCst);
                    work.lock().unwrap().push((i, phase, start, end));
                };
                nap();
                coord.register(agent).unwrap();
                nap();
                run_round::<_, _, ()>(
                    coord.as_ref(),
                    spec,
                    agent,
                    0,
                    |_| {
                        timed(0);
                        Ok(())
                    },
                    || {
                        timed(1);
                        Ok(())
                    },
                )
                .unwrap();
            });
        }
    });
    let work = work.into_inner().unwrap();
    let last_rollout_end = work.iter().filter(|w| w.1 == 0).map(|w| w.3).max().unwrap_or(0);
    let first_update_start = work.iter().filter(|w| w.1 == 1).map(|w| w.2).min().unwrap_or(u64::MAX);
    let mut violations = log_atomicity_violations(&coord.events(), agents.len());
    if first_update_start < last_rollout_end {
        violations += 1;
    }
    // rollout work never overlaps between agents
    let mut rollouts: Vec<_> = work.iter().filter(|w| w.1 == 0).collect();
    rollouts.sort_by_key(|w| w.2);
    violations += rollouts.windows(2).filter(|p| p[1].2 < p[0].3).count();
    violations += mutual_exclusion_violations(&coord.events());
    BarrierRep { grants: coord.grant_sequence(), atomicity_violations: violations }
}

#[derive(Debug)]
pub struct BarrierTally {
    pub reps: usize,
    pub distinct_grant_sequences: usize,
    pub atomicity_violations: usize,
}

pub fn barrier_determinism(reps: usize, max_delay_ms: u64, concurrency: usize) -> BarrierTally {
    let next = AtomicU64::new(0);
    let results: Mutex<Vec<BarrierRep>> = Mutex::new(Vec::new());
    thread::scope(|sc| {
        for _ in 0..concurrency {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= reps as u64 {
                    break;
                }
                let rep = barrier_rep(i, max_delay_ms);
                results.lock().unwrap().push(rep);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let sequences: BTreeSet<_> = results.iter().map(|r| r.grants.clone()).collect();
    BarrierTally {
        reps: results.len(),
        distinct_grant_sequences: sequences.len(),
        atomicity_violations: results.iter().map(|r| r.atomicity_violations).sum(),
    }
}

// ---------------------------------------------------------------- scheduler stress

#[derive(Debug, Default)]
pub struct StressTally {
    pub events: usize,
    pub submits: usize,
    pub terminates: usize,
    pub crashes: usize,
    pub probe_samples: usize,
    pub capacity_violations: usize,
    /// Time from a client's last heartbeat to its job showing REAPED with no slots.
    pub reap_times: Vec<Duration>,
    pub unreaped: usize,
    pub leaked_slots: usize,
}

struct StressJob {
    id: String,
    alive: Arc<AtomicBool>,
    last_beat: Arc<Mutex<Instant>>,
}

/// Random submit / terminate / client-crash events against a live scheduler.
pub fn scheduler_stress(events: usize, seed: u64, hb: Duration, grace: Duration, task_exe: PathBuf) -> StressTally {
    let config = SchedulerConfig {
        capacity: BTreeMap::from([("gpu".to_string(), 8)]),
        task_exe,
        work_dir: tempfile::tempdir().unwrap().keep(),
        heartbeat_interval: hb,
        grace,
        ..SchedulerConfig::default()
    };
    let server = start_scheduler(config, "127.0.0.1:0").unwrap();
    let sched = server.scheduler.clone();
    let stop = Arc::new(AtomicBool::new(false));
    // first time each job was seen final with nothing allocated
    let settled: Arc<Mutex<HashMap<String, (Instant, JobStatus)>>> = Arc::default();
    let probe = {
        let (sched, stop, settled) = (sched.clone(), stop.clone(), settled.clone());
        thread::spawn(move || {
            let (mut samples, mut bad) = (0, 0);
            while !stop.load(Ordering::SeqCst) {
                if let Ok(snap) = sched.snapshot() {
                    let now = Instant::now();
                    let mut seen = settled.lock().unwrap();
                    for j in snap.jobs.iter().filter(|j| j.status.is_final() && j.allocated.is_empty()) {
                        seen.entry(j.job_id.clone()).or_insert((now, j.status));
                    }
                    drop(seen);
                    samples += 1;
                    let used: usize = snap.jobs.iter().filter(|j| !j.status.is_final()).map(|j| j.allocated.get("gpu").map_or(0, Vec::len)).sum();
                    if !snap.capacity_violations().is_empty() || used > 8 {
                        bad += 1;
                    }
                }
                thread::sleep(Duration::from_millis(2));
            }
            (samples, bad)
        })
    };
    let mut r = rng(seed);
    let mut tally = StressTally { events, ..Default::default() };
    let mut live: Vec<StressJob> = Vec::new();
    let mut crashed: Vec<(String, Arc<Mutex<Instant>>)> = Vec::new();
    for _ in 0..events {
        let roll = r.random_range(0..100);
        if roll < 50 || live.is_empty() {
            tally.submits += 1;
            let spec = JobSpec::new(JobType::Rl).with_resource("gpu", r.random_range(1..=4)).with_param("env_kind", "arith");
            let h = sched.submit(spec).unwrap();
            let alive = Arc::new(AtomicBool::new(true));
            let last_beat = Arc::new(Mutex::new(Instant::now()));
            {
                let (sched, id, alive, last_beat) = (sched.clone(), h.job_id.clone(), alive.clone(), last_beat.clone());
                thread::spawn(move || {
                    while alive.load(Ordering::SeqCst) {
                        *last_beat.lock().unwrap() = Instant::now();
                        if !sched.heartbeat(&id, HeartbeatSource::Client) {
                            break;
                        }
                        thread::sleep(hb);
                    }
                });
            }
            live.push(StressJob { id: h.job_id, alive, last_beat });
        } else {
            let job = live.swap_remove(r.random_range(0..live.len()));
            if roll < 75 {
                tally.terminates += 1;
                job.alive.store(false, Ordering::SeqCst);
                sched.terminate(&job.id).unwrap();
            } else {
                tally.crashes += 1;
                job.alive.store(false, Ordering::SeqCst);
                crashed.push((job.id, job.last_beat));
            }
        }
        thread::sleep(Duration::from_millis(r.random_range(0..60)));
    }
    // every crashed client's job must be reaped; queued jobs whose turn never came count too
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut pending: Vec<_> = crashed;
    while !pending.is_empty() && Instant::now() < deadline {
        let seen = settled.lock().unwrap();
        pending.retain(|(id, last)| match seen.get(id) {
            Some((at, JobStatus::Reaped)) => {
                tally.reap_times.push(at.saturating_duration_since(*last.lock().unwrap()));
                false
            }
            Some(_) => {
                tally.unreaped += 1;
                false
            }
            None => true,
        });
        drop(seen);
        thread::sleep(Duration::from_millis(10));
    }
    tally.unreaped += pending.len();
    for job in live {
        job.alive.store(false, Ordering::SeqCst);
        sched.terminate(&job.id).unwrap();
    }
    stop.store(true, Ordering::SeqCst);
    let (samples, bad) = probe.join().unwrap();
    tally.probe_samples = samples;
    tally.capacity_violations = bad;
    let snap = sched.snapshot().unwrap();
    tally.leaked_slots = snap.jobs.iter().map(|j| j.allocated.values().map(Vec::len).sum::<usize>()).sum();
    tally
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug)]
pub struct CheckpointTally {
    pub prompts: usize,
    pub differing_outputs: usize,
    pub recorded: f64,
    pub after_reload: f64,
    pub fresh_server: f64,
}

fn random_prompt(r: &mut EpisodeRng) -> String {
    (0..r.random_range(0..20)).map(|_| r.random_range(32u8..127) as char).collect()
}

pub fn checkpoint_fidelity(prompts: usize, seed: u64) -> CheckpointTally {
    let dir = tempfile::tempdir().unwrap();
    let spec = JobSpec::new(JobType::Rl)
        .with_param("env_kind", "gomoku")
        .with_param("context_window", 12)
        .with_param("format_prior", true)
        .with_param("group_size", 32)
        .with_param("learning_rate", 0.01)
        .with_param("seed", seed);
    let server = task_server(spec.clone(), Some(dir.path()));
    for _ in 0..10 {
        server.train_step(None, None).unwrap();
    }
    let recorded = server.validate(None, None).unwrap().mean;
    let version = server.save_checkpoint().unwrap();
    let mut r = rng(seed);
    let asks: Vec<GenerateRequest> = (0..prompts)
        .map(|_| GenerateRequest { prompt: random_prompt(&mut r), decoding: rlaas::policy::Decoding::Greedy, max_tokens: 16, seed: 0 })
        .collect();
    let before: Vec<String> = asks.iter().map(|a| server.generate(a).unwrap()).collect();
    for _ in 0..10 {
        server.train_step(None, None).unwrap();
    }
    server.load_checkpoint(Some(version)).unwrap();
    let after_reload = server.validate(None, None).unwrap().mean;

    let mut resumed = spec;
    resumed.checkpoint_init = Some(rlaas::types::CheckpointRef { store: dir.path().display().to_string(), version: Some(version) });
    let fresh = task_server(resumed, None);
    let fresh_server = fresh.validate(None, None).unwrap().mean;
    let differing_outputs = asks.iter().zip(&before).filter(|(a, b)| fresh.generate(a).unwrap() != **b).count();
    CheckpointTally { prompts, differing_outputs, recorded, after_reload, fresh_server }
}
