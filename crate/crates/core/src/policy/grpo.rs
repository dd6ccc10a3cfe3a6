//! Group-baseline policy gradient.
//!
//! For a group of finished episodes with returns `R_i`, the advantage is
//! `A_i = (R_i - mean R) / std R` (std replaced by 1 when below 1e-8). Every
//! action token `a` generated at context `c` contributes the exact gradient of
//! `A_i * log p(a | c)`:
//!
//! ```text
//! w[(f, t)] += lr * A_i * (1[t == a] - p(t | c)) / temperature    for f in features(c)
//! ```
//!
//! All gradients are taken at the incoming parameters and applied once.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{softmax, PolicyParams, GREEDY_TEMPERATURE};
use crate::types::{SegmentSource, Token, Trajectory};

pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("empty group")]
    EmptyGroup,
    #[error("trajectory {0} is not terminated")]
    UnterminatedTrajectory(usize),
    #[error("trajectory {trajectory} has token {token} outside the policy vocabulary")]
    TokenOutsideVocab { trajectory: usize, token: u8 },
    #[error("cannot take gradients of a greedy (zero temperature) policy")]
    GreedyPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advantage {
    /// Group-mean baseline with std normalization.
    GroupNormalized,
    /// Same advantage for every episode (behavior cloning uses 1.0).
    Fixed(f64),
}

/// A token position that received gradient: index into the trajectory's
/// flattened token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TouchedToken {
    pub trajectory: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_return: f64,
    pub std_return: f64,
    /// Action tokens that contributed gradient terms.
    pub token_count: usize,
    pub episodes: usize,
    pub advantages: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub touched: Option<Vec<TouchedToken>>,
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    pub learning_rate: f64,
    pub advantage: Advantage,
    /// Record every token position that received gradient.
    pub trace: bool,
}

impl UpdateOptions {
    pub fn new(learning_rate: f64) -> Self {
        UpdateOptions { learning_rate, advantage: Advantage::GroupNormalized, trace: false }
    }
}

pub fn group_advantages(returns: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > STD_EPSILON { std } else { 1.0 };
    let adv = returns.iter().map(|r| (r - mean) / scale).collect();
    (mean, std, adv)
}

pub fn grpo_update(
    params: &PolicyParams,
    group: &[Trajectory],
    learning_rate: f64,
) -> Result<(PolicyParams, UpdateStats), UpdateError> {
    update(params, group, UpdateOptions::new(learning_rate))
}

/// Sum over the group of `A_i * grad log p(actions_i)`, keyed by bucket.
pub fn policy_gradient(
    params: &PolicyParams,
    group: &[Trajectory],
    advantages: &[f64],
    mut touched: Option<&mut Vec<TouchedToken>>,
) -> Result<(HashMap<u16, Vec<f64>>, usize), UpdateError> {
    if params.temperature < GREEDY_TEMPERATURE {
        return Err(UpdateError::GreedyPolicy);
    }
    let vocab = params.vocab_size();
    let inv_t = 1.0 / params.temperature;
    let mut grad: HashMap<u16, Vec<f64>> = HashMap::new();
    let mut token_count = 0;
    for (i, (traj, &adv)) in group.iter().zip(advantages).enumerate() {
        if adv == 0.0 {
            continue;
        }
        let mut context: Vec<Token> = Vec::new();
        for seg in &traj.segments {
            for &tok in &seg.tokens {
                if seg.source == SegmentSource::Action {
                    if tok.index() >= vocab {
                        return Err(UpdateError::TokenOutsideVocab { trajectory: i, token: tok.value() });
                    }
                    let buckets = params.features(&context);
                    let probs = softmax(&params.logits_for(&buckets), params.temperature);
                    for b in buckets {
                        let row = grad.entry(b).or_insert_with(|| vec![0.0; vocab]);
                        for (t, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
                            let indicator = if t == tok.index() { 1.0 } else { 0.0 };
                            *g += adv * (indicator - p) * inv_t;
                        }
                    }
                    token_count += 1;
                    if let Some(log) = touched.as_deref_mut() {
                        log.push(TouchedToken { trajectory: i, position: context.len() });
                    }
                }
                context.push(tok);
            }
        }
    }
    Ok((grad, token_count))
}

pub fn update(
    params: &PolicyParams,
    group: &[Trajectory],
    options: UpdateOptions,
) -> Result<(PolicyParams, UpdateStats), UpdateError> {
    if group.is_empty() {
        return Err(UpdateError::EmptyGroup);
    }
    if let Some(i) = group.iter().position(|t| !t.terminated) {
        return Err(UpdateError::UnterminatedTrajectory(i));
    }
    let returns: Vec<f64> = group.iter().map(Trajectory::episode_return).collect();
    let (mean, std, normalized) = group_advantages(&returns);
    let advantages = match options.advantage {
        Advantage::GroupNormalized => normalized,
        Advantage::Fixed(a) => vec![a; group.len()],
    };
    let mut touched = options.trace.then(Vec::new);
    let (grad, token_count) = policy_gradient(params, group, &advantages, touched.as_mut())?;
    let mut next = params.clone();
    let mut buckets: Vec<_> = grad.into_iter().collect();
    buckets.sort_unstable_by_key(|(b, _)| *b);
    for (b, g) in buckets {
        let row = next.row_mut(b);
        for (w, d) in row.iter_mut().zip(g) {
            *w += options.learning_rate * d;
        }
    }
    Ok((
        next,
        UpdateStats {
            mean_return: mean,
            std_return: std,
            token_count,
            episodes: group.len(),
            advantages,
            touched,
        },
    ))
}
