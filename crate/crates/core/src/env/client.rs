use std::sync::Arc;

use super::{EnvError, EnvHost, EnvKind, ResetReply, ResetRequest, Seat, StepRequest};
use crate::protocol::MessageKind;
use crate::rpc::{RpcClient, RpcError};
use crate::types::{EnvState, StepResult};

/// Raw reset/step access to an environment host, local or remote.
pub trait EnvBackend: Send + Sync {
    fn reset(&self, req: &ResetRequest) -> Result<ResetReply, EnvError>;
    fn step(&self, req: &StepRequest) -> Result<StepResult, EnvError>;
}

impl EnvBackend for EnvHost {
    fn reset(&self, req: &ResetRequest) -> Result<ResetReply, EnvError> {
        EnvHost::reset(self, req)
    }

    fn step(&self, req: &StepRequest) -> Result<StepResult, EnvError> {
        EnvHost::step(self, req)
    }
}

/// An environment server reached over the wire protocol.
pub struct RemoteEnv {
    client: RpcClient,
}

impl RemoteEnv {
    pub fn connect(addr: &str) -> Result<Self, EnvError> {
        RpcClient::connect(addr)
            .map(|client| RemoteEnv { client })
            .map_err(|e| EnvError::Unreachable(format!("{addr}: {e}")))
    }
}

fn map_rpc(e: RpcError) -> EnvError {
    match e {
        RpcError::Remote { code, message } => match code.as_str() {
            "UnsupportedEnv" => EnvError::UnsupportedEnv(message),
            "UnknownEpisode" => EnvError::UnknownEpisode(message),
            "EpisodeFinished" => EnvError::EpisodeFinished(message),
            "BadRequest" => EnvError::BadRequest(message),
            _ => EnvError::Remote { code, message },
        },
        other => EnvError::Unreachable(other.to_string()),
    }
}

impl EnvBackend for RemoteEnv {
    fn reset(&self, req: &ResetRequest) -> Result<ResetReply, EnvError> {
        self.client.call_typed(MessageKind::EnvReset, req).map_err(map_rpc)
    }

    fn step(&self, req: &StepRequest) -> Result<StepResult, EnvError> {
        self.client.call_typed(MessageKind::EnvStep, req).map_err(map_rpc)
    }
}

/// What the rollout engine needs from an environment.
pub trait EnvClient: Send + Sync {
    fn reset(&self, seed: u64) -> Result<(String, EnvState), EnvError>;
    fn step(&self, episode_id: &str, action_text: &str) -> Result<StepResult, EnvError>;
}

/// Binds a backend to one environment kind (and seat, for gomoku).
#[derive(Clone)]
pub struct KindClient {
    backend: Arc<dyn EnvBackend>,
    kind: EnvKind,
    seat: Option<Seat>,
}

impl KindClient {
    pub fn new(backend: Arc<dyn EnvBackend>, kind: EnvKind) -> Self {
        KindClient { backend, kind, seat: None }
    }

    pub fn with_seat(mut self, seat: Seat) -> Self {
        self.seat = Some(seat);
        self
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }
}

impl EnvClient for KindClient {
    fn reset(&self, seed: u64) -> Result<(String, EnvState), EnvError> {
        let reply = self.backend.reset(&ResetRequest { kind: Some(self.kind), seed, seat: self.seat, match_id: None })?;
        Ok((reply.episode_id, EnvState::new(reply.state)))
    }

    fn step(&self, episode_id: &str, action_text: &str) -> Result<StepResult, EnvError> {
        self.backend.step(&StepRequest {
            episode_id: episode_id.to_string(),
            action_text: action_text.to_string(),
            seat: self.seat,
            observe: false,
        })
    }
}
