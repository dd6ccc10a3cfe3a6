//! Versioned on-disk checkpoint store.
//!
//! Layout: `<store>/ckpt-000000.txt`, `ckpt-000001.txt`, ... and a `LATEST`
//! file holding the newest version number. Each checkpoint is one JSON header
//! line followed by `bucket token weight` lines for every nonzero weight in
//! (bucket, token) order. The header's `checksum` is the SHA-256 of the body
//! bytes in lowercase hex.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::model::PolicyParams;
use crate::types::Token;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint store I/O on {path}: {source}")]
    StoreIo { path: PathBuf, source: io::Error },
    #[error("checkpoint version {0} not found")]
    VersionNotFound(u64),
    #[error("checkpoint store is empty")]
    Empty,
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::StoreIo { .. } => "StoreIOError",
            CheckpointError::VersionNotFound(_) | CheckpointError::Empty => "VersionNotFound",
            CheckpointError::Corrupt { .. } => "CorruptCheckpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointMetadata {
    pub job_id: String,
    pub step: u64,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub parent_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub version: u64,
    pub params: PolicyParams,
    pub metadata: CheckpointMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u64,
    metadata: CheckpointMetadata,
    checksum: String,
    temperature: f64,
    context_window: usize,
    vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSel {
    Latest,
    Exact(u64),
}

impl From<Option<u64>> for VersionSel {
    fn from(v: Option<u64>) -> Self {
        v.map_or(VersionSel::Latest, VersionSel::Exact)
    }
}

pub struct CheckpointStore {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::StoreIo { path: path.to_path_buf(), source }
}

pub fn checkpoint_file_name(version: u64) -> String {
    format!("ckpt-{version:06}.txt")
}

/// Body text: one `bucket token weight` line per nonzero weight.
pub fn render_body(params: &PolicyParams) -> String {
    let mut body = String::new();
    for (b, t, w) in params.nonzero() {
        body.push_str(&format!("{b} {t} {w:e}\n"));
    }
    body
}

pub fn body_checksum(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Stable fingerprint of a parameter set.
pub fn params_fingerprint(params: &PolicyParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("{:e} {} {}\n", params.temperature, params.context_window, params.vocab_size()));
    hasher.update(render_body(params).as_bytes());
    hex::encode(hasher.finalize())
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CheckpointError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(CheckpointStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, version: u64) -> PathBuf {
        self.root.join(checkpoint_file_name(version))
    }

    pub fn versions(&self) -> Result<Vec<u64>, CheckpointError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name
                .strip_prefix("ckpt-")
                .and_then(|s| s.strip_suffix(".txt"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn latest(&self) -> Result<Option<u64>, CheckpointError> {
        let marker = self.root.join("LATEST");
        match fs::read_to_string(&marker) {
            Ok(s) => s.trim().parse::<u64>().map(Some).map_err(|e| CheckpointError::Corrupt {
                path: marker.clone(),
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(self.versions()?.last().copied()),
            Err(e) => Err(io_err(&marker)(e)),
        }
    }

    fn write_atomic(&self, name: &str, contents: &[u8]) -> Result<(), CheckpointError> {
        let tmp = self.root.join(format!(".{name}.tmp-{}", std::process::id()));
        let dst = self.root.join(name);
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(contents).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &dst).map_err(io_err(&dst))
    }

    /// Writes the next version and returns its number.
    pub fn save(&self, params: &PolicyParams, mut metadata: CheckpointMetadata) -> Result<u64, CheckpointError> {
        let version = self.versions()?.last().map_or(0, |v| v + 1);
        if metadata.created_at == 0 {
            metadata.created_at = crate::types::now_millis();
        }
        let body = render_body(params);
        let header = Header {
            version,
            metadata,
            checksum: body_checksum(body.as_bytes()),
            temperature: params.temperature,
            context_window: params.context_window,
            vocab_size: params.vocab_size(),
        };
        let mut contents = serde_json::to_string(&header).expect("header serializes");
        contents.push('\n');
        contents.push_str(&body);
        self.write_atomic(&checkpoint_file_name(version), contents.as_bytes())?;
        self.write_atomic("LATEST", format!("{version}\n").as_bytes())?;
        Ok(version)
    }

    pub fn load(&self, which: VersionSel) -> Result<PolicyCheckpoint, CheckpointError> {
        let version = match which {
            VersionSel::Exact(v) => v,
            VersionSel::Latest => self.latest()?.ok_or(CheckpointError::Empty)?,
        };
        let path = self.path_of(version);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CheckpointError::VersionNotFound(version)),
            Err(e) => return Err(io_err(&path)(e)),
        };
        parse_checkpoint(&text).map_err(|reason| CheckpointError::Corrupt { path, reason })
    }
}

pub fn parse_checkpoint(text: &str) -> Result<PolicyCheckpoint, String> {
    let (header_line, body) = text.split_once('\n').ok_or("missing header line")?;
    let header: Header = serde_json::from_str(header_line).map_err(|e| format!("header: {e}"))?;
    if body_checksum(body.as_bytes()) != header.checksum {
        return Err("checksum mismatch".into());
    }
    if !(1..=crate::types::VOCAB_SIZE).contains(&header.vocab_size) {
        return Err(format!("vocab size {} out of range", header.vocab_size));
    }
    let mut params = PolicyParams::with_vocab(header.context_window, header.vocab_size);
    params.temperature = header.temperature;
    for (n, line) in body.lines().enumerate() {
        let mut parts = line.split(' ');
        let (Some(b), Some(t), Some(w), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected `bucket token weight`", n + 2));
        };
        let bucket: u16 = b.parse().map_err(|e| format!("line {}: bucket: {e}", n + 2))?;
        let token = t
            .parse::<u8>()
            .ok()
            .and_then(Token::new)
            .filter(|tok| tok.index() < header.vocab_size)
            .ok_or_else(|| format!("line {}: bad token {t:?}", n + 2))?;
        let weight: f64 = w.parse().map_err(|e| format!("line {}: weight: {e}", n + 2))?;
        params.set_weight(bucket, token, weight);
    }
    Ok(PolicyCheckpoint { version: header.version, params, metadata: header.metadata })
}
