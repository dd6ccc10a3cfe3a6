//! Turn-based environments, the in-process instance host and the network
//! environment server.

pub mod arith;
pub mod client;
pub mod gomoku;
pub mod host;
pub mod server;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{EnvBackend, EnvClient, KindClient, RemoteEnv};
pub use gomoku::{GomokuState, Seat};
pub use host::EnvHost;
pub use server::{run_env_server, EnvServer, EnvServerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "gomoku")]
    Gomoku,
    #[serde(rename = "gomoku2")]
    GomokuTwoAgent,
    #[serde(rename = "arith")]
    Arith,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Gomoku => "gomoku",
            EnvKind::GomokuTwoAgent => "gomoku2",
            EnvKind::Arith => "arith",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s.to_ascii_lowercase().as_str() {
            "gomoku" => Ok(EnvKind::Gomoku),
            "gomoku2" | "gomoku_two_agent" => Ok(EnvKind::GomokuTwoAgent),
            "arith" => Ok(EnvKind::Arith),
            _ => Err(EnvError::UnsupportedEnv(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unsupported environment {0:?}")]
    UnsupportedEnv(String),
    #[error("unknown episode {0:?}")]
    UnknownEpisode(String),
    #[error("episode {0:?} already finished")]
    EpisodeFinished(String),
    #[error("not {seat:?}'s turn in episode {episode:?}")]
    NotYourTurn { episode: String, seat: Seat },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("environment unreachable: {0}")]
    Unreachable(String),
    #[error("environment error {code}: {message}")]
    Remote { code: String, message: String },
}

impl EnvError {
    pub fn code(&self) -> &str {
        match self {
            EnvError::UnsupportedEnv(_) => "UnsupportedEnv",
            EnvError::UnknownEpisode(_) => "UnknownEpisode",
            EnvError::EpisodeFinished(_) => "EpisodeFinished",
            EnvError::NotYourTurn { .. } => "NotYourTurn",
            EnvError::BadRequest(_) => "BadRequest",
            EnvError::Unreachable(_) => "EnvUnreachable",
            EnvError::Remote { code, .. } => code,
        }
    }
}

/// `env_reset` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EnvKind>,
    pub seed: u64,
    /// Seat the caller plays. Single-agent gomoku defaults to X; two-agent
    /// gomoku requires it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seat: Option<Seat>,
    /// Namespace for two-agent games so both seats join the same game.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetReply {
    pub episode_id: String,
    pub state: String,
}

/// `env_step` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub episode_id: String,
    pub action_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seat: Option<Seat>,
    /// Two-agent games only: read the state (and any pending final score)
    /// without moving.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub observe: bool,
}
