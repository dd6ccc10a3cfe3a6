use std::io;
use std::sync::{Arc, Condvar, Mutex};

use serde_json::{Map, Value};

use super::{EnvError, EnvHost, EnvKind, ResetRequest, StepRequest};
use crate::coordinator::{Coordinator, CoordinatorService};
use crate::protocol::MessageKind;
use crate::rpc::{bind, parse_payload, serve, to_payload, ServerHandle, ServiceError};

#[derive(Clone)]
pub struct EnvServerConfig {
    pub bind: String,
    pub default_kind: EnvKind,
    pub kinds: Vec<EnvKind>,
    pub server_seed: u64,
    /// Upper bound on concurrently executing env requests.
    pub max_parallel: usize,
    /// Hosted coordinator for multi-agent jobs, if any.
    pub coordinator: Option<Arc<Coordinator>>,
}

impl Default for EnvServerConfig {
    fn default() -> Self {
        EnvServerConfig {
            bind: "127.0.0.1:0".into(),
            default_kind: EnvKind::Gomoku,
            kinds: vec![EnvKind::Gomoku, EnvKind::GomokuTwoAgent, EnvKind::Arith],
            server_seed: 0,
            max_parallel: 64,
            coordinator: None,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.cv.notify_one();
        out
    }
}

fn env_error(e: EnvError) -> ServiceError {
    ServiceError::new(e.code(), e.to_string())
}

pub struct EnvService {
    host: Arc<EnvHost>,
    limit: Semaphore,
    coord: Option<CoordinatorService>,
}

impl EnvService {
    pub fn new(host: Arc<EnvHost>, max_parallel: usize, coordinator: Option<Arc<Coordinator>>) -> Self {
        EnvService {
            host,
            limit: Semaphore { free: Mutex::new(max_parallel.max(1)), cv: Condvar::new() },
            coord: coordinator.map(CoordinatorService::new),
        }
    }

    pub fn handle(&self, kind: MessageKind, payload: Map<String, Value>) -> Result<Value, ServiceError> {
        match kind {
            MessageKind::EnvReset => {
                let req: ResetRequest = parse_payload(payload)?;
                let reply = self.limit.run(|| self.host.reset(&req)).map_err(env_error)?;
                to_payload(&reply)
            }
            MessageKind::EnvStep => {
                let req: StepRequest = parse_payload(payload)?;
                let result = self.limit.run(|| self.host.step(&req)).map_err(env_error)?;
                to_payload(&result)
            }
            k if CoordinatorService::handles(k) => match &self.coord {
                Some(c) => c.handle(k, payload),
                None => Err(ServiceError::new("NoCoordinator", "this server hosts no coordinator")),
            },
            other => Err(ServiceError::new("UnsupportedKind", format!("env server does not handle {}", other.as_str()))),
        }
    }
}

pub struct EnvServer {
    pub handle: ServerHandle,
    pub host: Arc<EnvHost>,
    pub coordinator: Option<Arc<Coordinator>>,
}

impl EnvServer {
    pub fn addr(&self) -> String {
        self.handle.addr_string()
    }
}

/// Binds and starts an environment server in background threads.
pub fn run_env_server(config: EnvServerConfig) -> io::Result<EnvServer> {
    let host = Arc::new(EnvHost::with_kinds(config.default_kind, &config.kinds, config.server_seed));
    let service = Arc::new(EnvService::new(host.clone(), config.max_parallel, config.coordinator.clone()));
    let listener = bind(&config.bind)?;
    let handle = serve(listener, Arc::new(move |kind, payload| service.handle(kind, payload)))?;
    log::info!("env server listening on {}", handle.addr_string());
    Ok(EnvServer { handle, host, coordinator: config.coordinator })
}
