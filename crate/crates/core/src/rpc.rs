//! Blocking TCP transport for the line protocol: a threaded server that
//! answers pipelined requests out of order, and a client that matches
//! responses to in-flight calls by id.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::protocol::{decode, encode, salvage_id, Kind, Message, MessageKind, ProtocolError, MAX_FRAME_BYTES};

/// Error a service returns for one request; becomes a `<kind>.err` response.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError { code: code.into(), message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ServiceError::new("BadRequest", message)
    }
}

/// A request handler. Called concurrently from many threads.
pub trait Service: Send + Sync + 'static {
    fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError>;
}

impl<F> Service for F
where
    F: Fn(MessageKind, Map<String, Value>) -> Result<Value, ServiceError> + Send + Sync + 'static,
{
    fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError> {
        self(kind, payload)
    }
}

/// Reads one newline-terminated frame. `Ok(None)` on clean EOF.
pub fn read_frame<R: BufRead>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    let n = io::Read::take(&mut *reader, MAX_FRAME_BYTES as u64).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(buf))
}

/// Writes a whole frame under the connection's writer lock so frames never interleave.
fn write_frame(writer: &Mutex<TcpStream>, bytes: &[u8]) -> io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
    w.write_all(bytes)?;
    w.flush()
}

/// Running server; dropping it does not stop it, call [`ServerHandle::stop`].
pub struct ServerHandle {
    addr: SocketAddr,
    stopped: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    accept_thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn addr_string(&self) -> String {
        self.addr.to_string()
    }

    /// Stops accepting and closes every open connection.
    pub fn stop(&mut self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for c in self.connections.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks the calling thread until the server is stopped.
    pub fn join(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

pub fn bind(addr: &str) -> io::Result<TcpListener> {
    TcpListener::bind(addr)
}

/// Serves `service` on `listener`, one reader thread per connection and one
/// worker thread per request.
pub fn serve(listener: TcpListener, service: Arc<dyn Service>) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stopped = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let accept_thread = {
        let stopped = stopped.clone();
        let connections = connections.clone();
        thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
            for stream in listener.incoming() {
                if stopped.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    let mut conns = connections.lock().unwrap_or_else(|p| p.into_inner());
                    conns.retain(|c| c.peer_addr().is_ok());
                    conns.push(clone);
                }
                let service = service.clone();
                let _ = thread::Builder::new()
                    .name("conn".into())
                    .spawn(move || handle_connection(stream, service));
            }
        })?
    };
    Ok(ServerHandle { addr, stopped, connections, accept_thread: Some(accept_thread) })
}

fn handle_connection(stream: TcpStream, service: Arc<dyn Service>) {
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => break,
        };
        let request = match decode(&frame) {
            Ok(m) => m,
            Err(e) => {
                let reply = Message::protocol_err(salvage_id(&frame), &e);
                if let Ok(bytes) = encode(&reply) {
                    let _ = write_frame(&writer, &bytes);
                }
                if matches!(e, ProtocolError::Frame(_)) {
                    // oversized or truncated input: the stream position is unknown
                    break;
                }
                continue;
            }
        };
        let kind = match request.kind {
            Kind::Request(k) => k,
            _ => {
                let e = ProtocolError::Schema(format!("unexpected response kind {}", request.kind));
                if let Ok(bytes) = encode(&Message::protocol_err(request.id, &e)) {
                    let _ = write_frame(&writer, &bytes);
                }
                continue;
            }
        };
        let service = service.clone();
        let writer = writer.clone();
        let _ = thread::Builder::new().name(format!("req-{kind}")).spawn(move || {
            let reply = match service.handle(kind, request.payload) {
                Ok(Value::Object(map)) => Message::ok(request.id, kind, map),
                Ok(Value::Null) => Message::ok(request.id, kind, Map::new()),
                Ok(other) => {
                    let mut map = Map::new();
                    map.insert("value".into(), other);
                    Message::ok(request.id, kind, map)
                }
                Err(e) => Message::err(request.id, kind, &e.code, &e.message),
            };
            match encode(&reply) {
                Ok(bytes) => {
                    let _ = write_frame(&writer, &bytes);
                }
                Err(e) => {
                    let fallback = Message::err(request.id, kind, e.code(), &e.to_string());
                    if let Ok(bytes) = encode(&fallback) {
                        let _ = write_frame(&writer, &bytes);
                    }
                }
            }
        });
    }
}

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("remote {code}: {message}")]
    Remote { code: String, message: String },
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for response")]
    Timeout,
    #[error("bad response payload: {0}")]
    BadResponse(String),
}

impl RpcError {
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            RpcError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }

    /// True when the failure is the transport rather than the remote service.
    pub fn is_transport(&self) -> bool {
        matches!(self, RpcError::Transport(_) | RpcError::Closed | RpcError::Timeout)
    }
}

type Pending = Arc<Mutex<HashMap<u64, mpsc::Sender<Message>>>>;

/// A pipelining client: many threads may call concurrently over one connection.
pub struct RpcClient {
    writer: Mutex<TcpStream>,
    pending: Pending,
    next_id: AtomicU64,
    closed: Arc<AtomicBool>,
    peer: String,
}

impl RpcClient {
    pub fn connect(addr: &str) -> Result<Self, RpcError> {
        Self::connect_timeout(addr, Duration::from_secs(5))
    }

    pub fn connect_timeout(addr: &str, timeout: Duration) -> Result<Self, RpcError> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("bad address {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone()?;
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = pending.clone();
            let closed = closed.clone();
            thread::Builder::new().name(format!("rpc-reader-{addr}")).spawn(move || {
                let mut reader = BufReader::new(reader);
                while let Ok(Some(frame)) = read_frame(&mut reader) {
                    match decode(&frame) {
                        Ok(msg) if msg.kind.is_response() => {
                            let tx = pending.lock().unwrap_or_else(|p| p.into_inner()).remove(&msg.id);
                            if let Some(tx) = tx {
                                let _ = tx.send(msg);
                            }
                        }
                        Ok(msg) => log::warn!("client received request kind {}", msg.kind),
                        Err(e) => log::warn!("undecodable response: {e}"),
                    }
                }
                closed.store(true, Ordering::SeqCst);
                // dropping senders wakes every waiter with Closed
                pending.lock().unwrap_or_else(|p| p.into_inner()).clear();
            })?;
        }
        Ok(RpcClient {
            writer: Mutex::new(stream),
            pending,
            next_id: AtomicU64::new(1),
            closed,
            peer: addr.to_string(),
        })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn call(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Map<String, Value>, RpcError> {
        self.call_with_timeout(kind, payload, None)
    }

    pub fn call_with_timeout(
        &self,
        kind: MessageKind,
        payload: Map<String, Value>,
        timeout: Option<Duration>,
    ) -> Result<Map<String, Value>, RpcError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(RpcError::Closed);
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap_or_else(|p| p.into_inner()).insert(id, tx);
        let bytes = encode(&Message::request(id, kind, payload))?;
        if let Err(e) = write_frame(&self.writer, &bytes) {
            self.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(&id);
            return Err(e.into());
        }
        let reply = match timeout {
            Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => RpcError::Timeout,
                mpsc::RecvTimeoutError::Disconnected => RpcError::Closed,
            }),
            None => rx.recv().map_err(|_| RpcError::Closed),
        };
        let reply = match reply {
            Ok(r) => r,
            Err(e) => {
                self.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(&id);
                return Err(e);
            }
        };
        match reply.kind {
            Kind::Ok(_) => Ok(reply.payload),
            Kind::Err(_) | Kind::ProtocolErr => Err(RpcError::Remote {
                code: str_field(&reply.payload, "error").unwrap_or("Unknown").to_string(),
                message: str_field(&reply.payload, "message").unwrap_or("").to_string(),
            }),
            Kind::Request(_) => Err(RpcError::BadResponse("request kind in response".into())),
        }
    }

    /// Typed convenience wrapper around [`RpcClient::call`].
    pub fn call_typed<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        kind: MessageKind,
        request: &Req,
    ) -> Result<Resp, RpcError> {
        let payload = match serde_json::to_value(request) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(ProtocolError::Serialization("payload must be an object".into()).into()),
            Err(e) => return Err(ProtocolError::Serialization(e.to_string()).into()),
        };
        let reply = self.call(kind, payload)?;
        serde_json::from_value(Value::Object(reply)).map_err(|e| RpcError::BadResponse(e.to_string()))
    }

    /// Closes the underlying socket; in-flight calls fail with `Closed`.
    pub fn close(&self) {
        let w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let _ = w.shutdown(Shutdown::Both);
    }
}

impl Drop for RpcClient {
    fn drop(&mut self) {
        self.close();
    }
}

pub fn str_field<'a>(m: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    m.get(key).and_then(Value::as_str)
}

/// Parses a typed request out of a payload map.
pub fn parse_payload<T: DeserializeOwned>(payload: Map<String, Value>) -> Result<T, ServiceError> {
    serde_json::from_value(Value::Object(payload)).map_err(|e| ServiceError::bad_request(e.to_string()))
}

pub fn to_payload<T: Serialize>(value: &T) -> Result<Value, ServiceError> {
    serde_json::to_value(value).map_err(|e| ServiceError::new("SerializationError", e.to_string()))
}
