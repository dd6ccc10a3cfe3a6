//! Newline-delimited JSON message framing.
//!
//! Every message is one line: `{"id":N,"kind":"...","payload":{...}}\n`.
//! Requests use one of the [`MessageKind`] names; the matching response is
//! `<kind>.ok` or `<kind>.err` and carries the request's id. Input that cannot
//! be attributed to a request kind is answered with `protocol.err`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Longest accepted frame, newline included.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("frame error: {0}")]
    Frame(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Frame(_) => "FrameError",
            ProtocolError::Parse(_) => "ParseError",
            ProtocolError::Schema(_) => "SchemaError",
            ProtocolError::Serialization(_) => "SerializationError",
        }
    }
}

macro_rules! message_kinds {
    ($($variant:ident => $name:literal [$($field:literal),*]),+ $(,)?) => {
        /// The closed set of request kinds.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum MessageKind {
            $($variant),+
        }

        impl MessageKind {
            pub const ALL: &'static [MessageKind] = &[$(MessageKind::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(MessageKind::$variant => $name),+
                }
            }

            /// Payload fields a request of this kind must carry.
            pub fn required_fields(self) -> &'static [&'static str] {
                match self {
                    $(MessageKind::$variant => &[$($field),*]),+
                }
            }
        }

        impl FromStr for MessageKind {
            type Err = ProtocolError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(MessageKind::$variant),)+
                    other => Err(ProtocolError::Schema(format!("unknown message kind {other:?}"))),
                }
            }
        }
    };
}

message_kinds! {
    SubmitJob => "submit_job" ["spec"],
    JobStatus => "job_status" ["job_id"],
    TerminateJob => "terminate_job" ["job_id"],
    Heartbeat => "heartbeat" ["job_id"],
    TrainStep => "train_step" [],
    Validate => "validate" [],
    Generate => "generate" ["prompt"],
    SaveCheckpoint => "save_checkpoint" [],
    LoadCheckpoint => "load_checkpoint" ["version"],
    EnvReset => "env_reset" ["seed"],
    EnvStep => "env_step" ["episode_id", "action_text"],
    CoordRegister => "coord_register" ["agent_id"],
    CoordArrive => "coord_arrive" ["agent_id", "barrier"],
    CoordWaitTurn => "coord_wait_turn" ["agent_id"],
    CoordRelease => "coord_release" ["agent_id"],
    StreamMetric => "stream_metric" ["job_id", "metric"],
    SchedulerInfo => "scheduler_info" [],
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full message kind: a request or one of its two responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Request(MessageKind),
    Ok(MessageKind),
    Err(MessageKind),
    /// Response to input that could not be decoded into a request.
    ProtocolErr,
}

impl Kind {
    pub fn is_response(self) -> bool {
        !matches!(self, Kind::Request(_))
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Request(k) => write!(f, "{k}"),
            Kind::Ok(k) => write!(f, "{k}.ok"),
            Kind::Err(k) => write!(f, "{k}.err"),
            Kind::ProtocolErr => f.write_str("protocol.err"),
        }
    }
}

impl FromStr for Kind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, ProtocolError> {
        if s == "protocol.err" {
            return Ok(Kind::ProtocolErr);
        }
        if let Some(base) = s.strip_suffix(".ok") {
            return base.parse().map(Kind::Ok);
        }
        if let Some(base) = s.strip_suffix(".err") {
            return base.parse().map(Kind::Err);
        }
        s.parse().map(Kind::Request)
    }
}

impl Serialize for Kind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub id: u64,
    pub kind: Kind,
    pub payload: Map<String, Value>,
}

#[derive(Serialize)]
struct Wire<'a> {
    id: u64,
    kind: Kind,
    payload: &'a Map<String, Value>,
}

#[derive(Deserialize)]
struct RawWire {
    id: Option<Value>,
    kind: Option<Value>,
    payload: Option<Value>,
}

impl Message {
    pub fn request(id: u64, kind: MessageKind, payload: Map<String, Value>) -> Self {
        Message { id, kind: Kind::Request(kind), payload }
    }

    /// Builds a message from any serializable payload that renders as a JSON object.
    pub fn from_payload<T: Serialize>(id: u64, kind: Kind, payload: &T) -> Result<Self, ProtocolError> {
        match serde_json::to_value(payload) {
            Ok(Value::Object(map)) => Ok(Message { id, kind, payload: map }),
            Ok(other) => Err(ProtocolError::Serialization(format!(
                "payload must be a JSON object, got {other}"
            ))),
            Err(e) => Err(ProtocolError::Serialization(e.to_string())),
        }
    }

    pub fn ok(id: u64, kind: MessageKind, payload: Map<String, Value>) -> Self {
        Message { id, kind: Kind::Ok(kind), payload }
    }

    pub fn err(id: u64, kind: MessageKind, code: &str, message: &str) -> Self {
        Message { id, kind: Kind::Err(kind), payload: error_payload(code, message) }
    }

    pub fn protocol_err(id: u64, error: &ProtocolError) -> Self {
        Message {
            id,
            kind: Kind::ProtocolErr,
            payload: error_payload(error.code(), &error.to_string()),
        }
    }
}

fn error_payload(code: &str, message: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("error".into(), Value::String(code.to_string()));
    m.insert("message".into(), Value::String(message.to_string()));
    m
}

/// Serializes a message as a single newline-terminated JSON line.
pub fn encode(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    let mut out = serde_json::to_vec(&Wire { id: m.id, kind: m.kind, payload: &m.payload })
        .map_err(|e| ProtocolError::Serialization(e.to_string()))?;
    // serde_json escapes control characters, so a raw newline here is a bug
    debug_assert!(!out.contains(&b'\n'));
    out.push(b'\n');
    Ok(out)
}

/// Parses exactly one framed line produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let body = match bytes.split_last() {
        Some((b'\n', body)) => body,
        _ => return Err(ProtocolError::Frame("missing terminating newline".into())),
    };
    if bytes.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Frame(format!("frame exceeds {MAX_FRAME_BYTES} bytes")));
    }
    if body.contains(&b'\n') {
        return Err(ProtocolError::Frame("embedded newline inside frame".into()));
    }
    let raw: RawWire = match serde_json::from_slice::<Value>(body) {
        Ok(v @ Value::Object(_)) => serde_json::from_value(v)
            .map_err(|e| ProtocolError::Schema(e.to_string()))?,
        Ok(other) => return Err(ProtocolError::Schema(format!("frame is not an object: {other}"))),
        Err(e) => return Err(ProtocolError::Parse(e.to_string())),
    };
    let id = raw
        .id
        .as_ref()
        .and_then(Value::as_u64)
        .ok_or_else(|| ProtocolError::Schema("missing or non-integer id".into()))?;
    let kind: Kind = raw
        .kind
        .as_ref()
        .and_then(Value::as_str)
        .ok_or_else(|| ProtocolError::Schema("missing kind".into()))?
        .parse()?;
    let payload = match raw.payload {
        Some(Value::Object(map)) => map,
        Some(_) => return Err(ProtocolError::Schema("payload is not an object".into())),
        None => return Err(ProtocolError::Schema("missing payload".into())),
    };
    match kind {
        Kind::Request(k) => {
            if let Some(field) = k.required_fields().iter().find(|f| !payload.contains_key(**f)) {
                return Err(ProtocolError::Schema(format!("{k} payload missing field {field:?}")));
            }
        }
        Kind::Err(_) | Kind::ProtocolErr => {
            if !payload.get("error").is_some_and(Value::is_string) {
                return Err(ProtocolError::Schema("error response without error code".into()));
            }
        }
        Kind::Ok(_) => {}
    }
    Ok(Message { id, kind, payload })
}

/// Best-effort id recovery from a frame that failed to decode, so the error
/// response can still be matched by the caller.
pub fn salvage_id(bytes: &[u8]) -> u64 {
    serde_json::from_slice::<Value>(bytes.strip_suffix(b"\n").unwrap_or(bytes))
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_u64))
        .unwrap_or(0)
}
