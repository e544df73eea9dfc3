//! Run-directory plumbing: the lock file, the manifest and corpus digests.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const LOCK_FILE: &str = ".hybridlm.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock, Failure> {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::usage(format!(
                "run directory {} is in use by another process; remove {} if no other run is active",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::runtime(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 over each file's length (little-endian u64) followed by its bytes.
pub fn corpus_digest(paths: &[PathBuf]) -> Result<String, Failure> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p)
            .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", p.display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_manifest(dir: &Path) -> Map<String, Value> {
    fs::read_to_string(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

/// Replace one subcommand's section of `manifest.json`.
pub fn write_manifest_section(dir: &Path, section: &str, value: Value) -> Result<(), Failure> {
    let mut m = read_manifest(dir);
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert(section.into(), value);
    let text = serde_json::to_string_pretty(&Value::Object(m)).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}
