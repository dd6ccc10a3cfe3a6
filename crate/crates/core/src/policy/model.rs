//! Sparse linear softmax policy over the token vocabulary.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::features;
use crate::types::{Token, VOCAB_SIZE};

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

pub const DEFAULT_CONTEXT_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decoding {
    #[default]
    Sample,
    Greedy,
}

/// Weights indexed by (feature bucket, token). Rows that were never touched
/// are absent and read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    rows: BTreeMap<u16, Vec<f64>>,
    pub temperature: f64,
    pub context_window: usize,
    vocab_size: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams::new(DEFAULT_CONTEXT_WINDOW)
    }
}

impl PolicyParams {
    pub fn new(context_window: usize) -> Self {
        PolicyParams {
            rows: BTreeMap::new(),
            temperature: 1.0,
            context_window: context_window.max(1),
            vocab_size: VOCAB_SIZE,
        }
    }

    /// A policy whose support is the first `vocab_size` tokens.
    pub fn with_vocab(context_window: usize, vocab_size: usize) -> Self {
        assert!((1..=VOCAB_SIZE).contains(&vocab_size), "vocab size must be in 1..=128");
        PolicyParams { vocab_size, ..PolicyParams::new(context_window) }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn weight(&self, bucket: u16, token: Token) -> f64 {
        self.rows.get(&bucket).and_then(|r| r.get(token.index())).copied().unwrap_or(0.0)
    }

    pub fn set_weight(&mut self, bucket: u16, token: Token, value: f64) {
        let vocab = self.vocab_size;
        if token.index() >= vocab {
            return;
        }
        self.rows.entry(bucket).or_insert_with(|| vec![0.0; vocab])[token.index()] = value;
    }

    pub(crate) fn row_mut(&mut self, bucket: u16) -> &mut [f64] {
        let vocab = self.vocab_size;
        self.rows.entry(bucket).or_insert_with(|| vec![0.0; vocab])
    }

    /// Nonzero entries in (bucket, token) order.
    pub fn nonzero(&self) -> impl Iterator<Item = (u16, u8, f64)> + '_ {
        self.rows.iter().flat_map(|(&b, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(move |(t, &w)| (b, t as u8, w))
        })
    }

    pub fn is_zero(&self) -> bool {
        self.nonzero().next().is_none()
    }

    pub fn features(&self, context: &[Token]) -> Vec<u16> {
        features(context, self.context_window)
    }

    /// `logit[t] = sum over feature buckets f of weight[(f, t)]`, multiset semantics.
    pub fn logits(&self, context: &[Token]) -> Vec<f64> {
        self.logits_for(&self.features(context))
    }

    pub fn logits_for(&self, buckets: &[u16]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for b in buckets {
            if let Some(row) = self.rows.get(b) {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w;
                }
            }
        }
        out
    }

    /// Softmax of `logits / temperature`; one-hot on the argmax when greedy.
    pub fn probabilities(&self, context: &[Token]) -> Vec<f64> {
        let logits = self.logits(context);
        if self.temperature < GREEDY_TEMPERATURE {
            let mut p = vec![0.0; logits.len()];
            p[argmax(&logits)] = 1.0;
            return p;
        }
        softmax(&logits, self.temperature)
    }

    pub fn sample_token<R: Rng + ?Sized>(&self, context: &[Token], rng: &mut R) -> (Token, f64) {
        let probs = self.probabilities(context);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        // guard against rounding leaving u above the final cumulative sum
        while probs[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        (token(chosen), probs[chosen])
    }

    /// Argmax of the logits, ties to the lowest token value.
    pub fn greedy_token(&self, context: &[Token]) -> Token {
        token(argmax(&self.logits(context)))
    }

    pub fn next_token<R: Rng + ?Sized>(&self, context: &[Token], decoding: Decoding, rng: &mut R) -> Token {
        match decoding {
            Decoding::Greedy => self.greedy_token(context),
            Decoding::Sample => self.sample_token(context, rng).0,
        }
    }
}

fn token(i: usize) -> Token {
    Token::new(i as u8).expect("index within vocabulary")
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
