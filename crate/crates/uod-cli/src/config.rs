//! Config-file overrides. Training commands resolve their effective
//! configuration in three layers: preset defaults, then a JSON config file,
//! then explicit flags. The file is a partial object mirroring the config
//! struct's own serialized field names (self-describing: serialize a default
//! config to see every key); unknown keys are rejected so typos cannot
//! silently fall back to defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use uod::error::{Result, UodError};

fn overlay(base: &mut serde_json::Value, patch: &serde_json::Value, path: &str) -> Result<()> {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (key, value) in p {
                let child = format!("{path}/{key}");
                match b.get_mut(key) {
                    Some(slot) => overlay(slot, value, &child)?,
                    None => {
                        return Err(UodError::config(format!(
                            "unknown config key {child:?}"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

/// Apply the JSON config file at `path` (if given) on top of `base`.
pub fn apply_config_file<T>(base: T, path: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path)
        .map_err(|e| UodError::config(format!("{}: {e}", path.display())))?;
    let patch: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| UodError::config(format!("{}: not valid JSON: {e}", path.display())))?;
    if !patch.is_object() {
        return Err(UodError::config(format!(
            "{}: top level must be a JSON object",
            path.display()
        )));
    }
    let mut value = serde_json::to_value(&base)
        .map_err(|e| UodError::config(format!("config encode: {e}")))?;
    overlay(&mut value, &patch, "")?;
    serde_json::from_value(value)
        .map_err(|e| UodError::config(format!("{}: {e}", path.display())))
}

/// Parse a repeatable `NAME=VALUE` flag.
pub fn parse_assignment(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((name, value)) if !name.is_empty() && !value.is_empty() => {
            Ok((name.to_string(), value.to_string()))
        }
        _ => Err(UodError::config(format!(
            "expected NAME=VALUE, got {raw:?}"
        ))),
    }
}
