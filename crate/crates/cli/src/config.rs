use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{CliError, Result};

pub const SEED_VAR: &str = "NB_SEED";

/// Parses a JSON config, rejecting unknown keys through the target type.
pub fn from_value<T: DeserializeOwned>(value: serde_json::Value, origin: &Path) -> Result<T> {
    serde_json::from_value(value).map_err(|source| CliError::Json { path: origin.to_path_buf(), source })
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

/// The config file's contents, or the type's defaults without one.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => from_value(read_json(p)?, p),
        None => Ok(T::default()),
    }
}

/// Configs listed in a sweep file, which must hold a JSON array.
pub fn sweep_entries(path: &Path) -> Result<Vec<serde_json::Value>> {
    match read_json(path)? {
        serde_json::Value::Array(items) if !items.is_empty() => Ok(items),
        _ => Err(CliError::Usage(format!("{}: a sweep file must be a non-empty JSON array of configs", path.display()))),
    }
}

/// Seed precedence: flag, then config file, then `NB_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
