//! Parameter archive plus JSON sidecar, stored side by side as
//! `<stem>.afnn` and `<stem>.json`.

use std::path::{Path, PathBuf};

use aftermath_nn::{ParamStore, Scalar};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar<M> {
    kind: String,
    dtype: String,
    params_hash: String,
    #[serde(flatten)]
    meta: M,
}

pub fn archive_path(stem: &Path) -> PathBuf {
    stem.with_extension("afnn")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn save<T: Scalar, M: Serialize>(stem: &Path, kind: &str, store: &ParamStore<T>, meta: &M) -> Result<()> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let archive = archive_path(stem);
    std::fs::write(&archive, store.to_bytes()).map_err(|e| Error::io(&archive, e))?;
    let sidecar = Sidecar { kind: kind.into(), dtype: T::DTYPE.into(), params_hash: store.content_hash(), meta };
    let side = sidecar_path(stem);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn load<T: Scalar, M: DeserializeOwned>(stem: &Path, kind: &str) -> Result<(ParamStore<T>, M)> {
    let side = sidecar_path(stem);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::load(&side, e.to_string()))?;
    let sidecar: Sidecar<M> = serde_json::from_str(&text).map_err(|e| Error::load(&side, e.to_string()))?;
    if sidecar.kind != kind {
        return Err(Error::load(&side, format!("expected a {kind} checkpoint, found {}", sidecar.kind)));
    }
    let archive = archive_path(stem);
    let bytes = std::fs::read(&archive).map_err(|e| Error::load(&archive, e.to_string()))?;
    let store = ParamStore::<T>::from_bytes(&bytes).map_err(|e| Error::load(&archive, e.to_string()))?;
    if store.content_hash() != sidecar.params_hash {
        return Err(Error::load(&archive, "parameter hash does not match its sidecar"));
    }
    Ok((store, sidecar.meta))
}

/// Reads only the recorded parameter hash of a checkpoint.
pub fn recorded_hash(stem: &Path) -> Result<String> {
    let side = sidecar_path(stem);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::load(&side, e.to_string()))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::load(&side, e.to_string()))?;
    v["params_hash"].as_str().map(str::to_owned).ok_or_else(|| Error::load(&side, "sidecar has no params_hash"))
}
