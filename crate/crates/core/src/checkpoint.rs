//! On-disk checkpoint layout: one safetensors weight file plus a JSON sidecar
//! (`<file>.meta.json`) holding the iteration counter, config hash and config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_sidecar<T: Serialize>(weights: &Path, meta: &T) -> Result<()> {
    let path = sidecar_path(weights);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar<T: DeserializeOwned>(weights: &Path) -> Result<T> {
    let path = sidecar_path(weights);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad metadata {}: {e}", path.display())))
}

pub(crate) fn check_kind(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds a {found} checkpoint, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}
