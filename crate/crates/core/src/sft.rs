//! Behavior-cloning data: trajectory files and the answer-format prior.
//!
//! The format prior teaches the shape of an answer ("one cell or number,
//! then newline") without any task knowledge: for every context it contains
//! one example per candidate answer, so cloning it leaves all candidates
//! equally likely and greedy decoding at chance.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::env::arith::ArithmeticTask;
use crate::env::host::random_move;
use crate::env::{EnvKind, GomokuState, Seat};
use crate::policy::codec;
use crate::policy::episode_rng;
use crate::types::{Segment, SegmentSource, TerminationReason, Token, Trajectory};

fn single_turn(id: String, context: &str, answer: &str) -> Trajectory {
    let mut t = Trajectory::new(id);
    t.segments.push(Segment {
        source: SegmentSource::Context,
        tokens: codec::encode(context).expect("ascii context"),
        turn_index: 0,
    });
    let mut action = codec::encode(answer).expect("ascii answer");
    action.push(crate::types::END_OF_ACTION);
    t.segments.push(Segment { source: SegmentSource::Action, tokens: action, turn_index: 0 });
    t.turn_rewards.insert(0, 0.0);
    t.terminated = true;
    t.termination_reason = Some(TerminationReason::EnvDone);
    t
}

/// Balanced answer-format examples for `kind`.
///
/// ARITH: every prompt of the task bank paired with each possible sum 0-18.
/// GOMOKU: `positions` random positions with `seat` to move, each paired
/// with every legal cell, which clones the uniform-random player.
pub fn format_prior(kind: EnvKind, seat: Seat, positions: usize, seed: u64, preamble: &str) -> Vec<Trajectory> {
    let mut out = Vec::new();
    match kind {
        EnvKind::Arith => {
            for s in 0..100 {
                let prompt = format!("{preamble}{}", ArithmeticTask::from_seed(s).prompt());
                for d in 0..19 {
                    out.push(single_turn(format!("prior-{s}-{d}"), &prompt, &d.to_string()));
                }
            }
        }
        EnvKind::Gomoku | EnvKind::GomokuTwoAgent => {
            let mut rng = episode_rng(seed);
            let mut made = 0;
            while made < positions {
                let mut state = GomokuState::default();
                let plies = rng.random_range(0..9);
                for _ in 0..plies {
                    if state.outcome().is_some() {
                        break;
                    }
                    let cell = random_move(&state, &mut rng);
                    state.play(cell);
                }
                if state.outcome().is_some() || state.to_move != seat {
                    continue;
                }
                let context = format!("{preamble}{}", state.render());
                for cell in state.legal_moves() {
                    out.push(single_turn(format!("prior-{made}-{}", cell + 1), &context, &(cell + 1).to_string()));
                }
                made += 1;
            }
        }
    }
    out
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_trajectories(path: &Path) -> io::Result<Vec<Trajectory>> {
    let f = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Tokens of every action in `t`, for quick inspection.
pub fn action_texts(t: &Trajectory) -> Vec<String> {
    t.action_segments()
        .map(|s| codec::decode(&s.tokens.iter().copied().filter(|x: &Token| !x.is_end_of_action()).collect::<Vec<_>>()))
        .collect()
}
