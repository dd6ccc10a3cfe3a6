use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{BarrierId, CoordError, Coordinator, CoordinatorApi, ProtocolSpec, TurnGrant};
use crate::protocol::MessageKind;
use crate::rpc::{parse_payload, to_payload, RpcClient, RpcError, ServiceError};

#[derive(Serialize, Deserialize)]
struct AgentRequest {
    agent_id: String,
}

#[derive(Serialize, Deserialize)]
struct ArriveRequest {
    agent_id: String,
    barrier: BarrierId,
}

#[derive(Serialize, Deserialize)]
struct RegisterReply {
    protocol: ProtocolSpec,
}

fn service_error(e: CoordError) -> ServiceError {
    ServiceError::new(e.code(), e.to_string())
}

/// Serves the `coord_*` message kinds for one coordinator.
#[derive(Clone)]
pub struct CoordinatorService {
    coord: Arc<Coordinator>,
}

impl CoordinatorService {
    pub fn new(coord: Arc<Coordinator>) -> Self {
        CoordinatorService { coord }
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coord
    }

    pub fn handles(kind: MessageKind) -> bool {
        matches!(
            kind,
            MessageKind::CoordRegister | MessageKind::CoordArrive | MessageKind::CoordWaitTurn | MessageKind::CoordRelease
        )
    }

    pub fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError> {
        match kind {
            MessageKind::CoordRegister => {
                let req: AgentRequest = parse_payload(payload)?;
                let protocol = self.coord.register(&req.agent_id).map_err(service_error)?;
                to_payload(&RegisterReply { protocol })
            }
            MessageKind::CoordArrive => {
                let req: ArriveRequest = parse_payload(payload)?;
                self.coord.arrive(&req.agent_id, req.barrier).map_err(service_error)?;
                Ok(json!({}))
            }
            MessageKind::CoordWaitTurn => {
                let req: AgentRequest = parse_payload(payload)?;
                let grant = self.coord.wait_turn(&req.agent_id).map_err(service_error)?;
                to_payload(&grant)
            }
            MessageKind::CoordRelease => {
                let req: AgentRequest = parse_payload(payload)?;
                self.coord.yield_turn(&req.agent_id).map_err(service_error)?;
                Ok(json!({}))
            }
            other => Err(ServiceError::new("UnsupportedKind", format!("{} is not a coordinator message", other.as_str()))),
        }
    }
}

/// Coordinator client over the wire protocol.
pub struct RemoteCoordinator {
    client: RpcClient,
}

impl RemoteCoordinator {
    pub fn connect(addr: &str) -> Result<Self, CoordError> {
        RpcClient::connect(addr)
            .map(|client| RemoteCoordinator { client })
            .map_err(|e| CoordError::Unreachable(format!("{addr}: {e}")))
    }

    fn call<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        kind: MessageKind,
        req: &Req,
    ) -> Result<Resp, CoordError> {
        self.client.call_typed(kind, req).map_err(|e| match e {
            RpcError::Remote { code, message } => CoordError::from_code(&code, message),
            other => CoordError::Unreachable(other.to_string()),
        })
    }
}

#[derive(Deserialize)]
struct Empty {}

impl CoordinatorApi for RemoteCoordinator {
    fn register(&self, agent_id: &str) -> Result<ProtocolSpec, CoordError> {
        let reply: RegisterReply =
            self.call(MessageKind::CoordRegister, &AgentRequest { agent_id: agent_id.to_string() })?;
        Ok(reply.protocol)
    }

    fn arrive(&self, agent_id: &str, barrier: BarrierId) -> Result<(), CoordError> {
        let _: Empty =
            self.call(MessageKind::CoordArrive, &ArriveRequest { agent_id: agent_id.to_string(), barrier })?;
        Ok(())
    }

    fn wait_turn(&self, agent_id: &str) -> Result<TurnGrant, CoordError> {
        self.call(MessageKind::CoordWaitTurn, &AgentRequest { agent_id: agent_id.to_string() })
    }

    fn yield_turn(&self, agent_id: &str) -> Result<(), CoordError> {
        let _: Empty = self.call(MessageKind::CoordRelease, &AgentRequest { agent_id: agent_id.to_string() })?;
        Ok(())
    }
}
