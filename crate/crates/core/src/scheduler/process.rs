//! Task-server child processes: launch with readiness handshake, exit
//! watching, and graceful-then-forced termination.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Map};

use crate::protocol::MessageKind;
use crate::rpc::RpcClient;

const POLL: Duration = Duration::from_millis(20);

/// Shared flags between the scheduler and the thread that owns a child.
#[derive(Debug, Default)]
pub struct ProcControl {
    kill: AtomicBool,
    exited: AtomicBool,
    pub pid: u32,
}

impl ProcControl {
    pub fn request_kill(&self) {
        self.kill.store(true, Ordering::SeqCst);
    }

    pub fn has_exited(&self) -> bool {
        self.exited.load(Ordering::SeqCst)
    }

    /// Polls until the child has exited or `timeout` passes.
    pub fn wait_exit(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.has_exited() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(POLL);
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct LaunchCommand {
    pub exe: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
}

/// Spawns the child and starts its watcher. `on_exit` runs once, from the
/// watcher thread, before [`ProcControl::has_exited`] turns true.
pub fn spawn(
    cmd: &LaunchCommand,
    on_exit: impl FnOnce(Option<i32>) + Send + 'static,
) -> std::io::Result<(Arc<ProcControl>, mpsc::Receiver<String>)> {
    let mut command = Command::new(&cmd.exe);
    command
        .args(&cmd.args)
        .envs(cmd.env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit());
    #[cfg(target_os = "linux")]
    {
        use std::os::unix::process::CommandExt;
        // the child dies with the spawning thread, which is the scheduler loop
        unsafe {
            command.pre_exec(|| {
                if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
    let mut child = command.spawn()?;
    let stdout = child.stdout.take().expect("piped stdout");
    let (line_tx, line_rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            match line {
                Ok(l) => {
                    let _ = line_tx.send(l);
                }
                Err(_) => break,
            }
        }
    });
    let control = Arc::new(ProcControl { pid: child.id(), ..ProcControl::default() });
    let ctl = control.clone();
    thread::spawn(move || watch(child, ctl, on_exit));
    Ok((control, line_rx))
}

fn watch(mut child: Child, control: Arc<ProcControl>, on_exit: impl FnOnce(Option<i32>)) {
    let mut killed = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status.code(),
            Ok(None) => {}
            Err(e) => {
                log::error!("waiting on pid {}: {e}", control.pid);
                break None;
            }
        }
        if !killed && control.kill.load(Ordering::SeqCst) {
            let _ = child.kill();
            killed = true;
        }
        thread::sleep(POLL);
    };
    on_exit(status);
    control.exited.store(true, Ordering::SeqCst);
}

/// Waits for the `READY <addr>` line. Returns the address.
pub fn await_ready(lines: &mpsc::Receiver<String>, timeout: Duration) -> Result<String, String> {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match lines.recv_timeout(left) {
            Ok(line) => {
                if let Some(addr) = line.trim().strip_prefix("READY ") {
                    return Ok(addr.trim().to_string());
                }
                log::debug!("task server: {line}");
            }
            Err(mpsc::RecvTimeoutError::Timeout) => return Err("timed out waiting for READY".into()),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err("task server exited before READY".into()),
        }
    }
}

/// Asks the task server to stop, waits `grace`, then kills. Returns true
/// when the kill was needed.
pub fn terminate(endpoint: Option<&str>, job_id: &str, control: &ProcControl, grace: Duration) -> bool {
    let started = Instant::now();
    if let Some(addr) = endpoint {
        let budget = grace.max(Duration::from_millis(100));
        match RpcClient::connect_timeout(addr, budget) {
            Ok(client) => {
                let mut p = Map::new();
                p.insert("job_id".into(), json!(job_id));
                if let Err(e) = client.call_with_timeout(MessageKind::TerminateJob, p, Some(budget)) {
                    log::warn!("terminate {job_id}: {e}");
                }
            }
            Err(e) => log::warn!("terminate {job_id}: {e}"),
        }
    }
    let left = grace.saturating_sub(started.elapsed());
    if control.wait_exit(left) {
        return false;
    }
    log::warn!("{job_id} did not stop within grace; killing pid {}", control.pid);
    control.request_kill();
    control.wait_exit(Duration::from_secs(10));
    true
}
