//! Model files: a binary parameter checkpoint plus a JSON sidecar holding
//! the architecture spec needed to rebuild the parameter layout.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::error::{Error, Result};
use crate::ParameterStore;

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar<T> {
    kind: String,
    format_version: u32,
    spec: T,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `path` (parameters) and `path.json` (spec).
pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: &str, spec: &T, store: &ParameterStore) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save_file(store, path)?;
    let side = Sidecar {
        kind: kind.to_string(),
        format_version: SIDECAR_VERSION,
        spec,
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side)?;
    std::fs::write(&sp, text + "\n").map_err(|e| Error::io(&sp, e))
}

/// Kind recorded in the sidecar of `path`.
pub fn kind_of(path: impl AsRef<Path>) -> Result<String> {
    let v: serde_json::Value = read_sidecar(path.as_ref())?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(String::from)
        .ok_or_else(|| Error::Checkpoint("sidecar has no kind".into()))
}

fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Spec stored next to `path`, checked against the expected kind.
pub fn load_spec<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    let side: Sidecar<serde_json::Value> = read_sidecar(path.as_ref())?;
    if side.format_version != SIDECAR_VERSION {
        return Err(Error::Version {
            found: side.format_version,
            expected: SIDECAR_VERSION,
        });
    }
    if side.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} model, found {}", side.kind)));
    }
    Ok(serde_json::from_value(side.spec)?)
}
