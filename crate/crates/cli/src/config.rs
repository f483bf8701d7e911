//! Layered configuration: defaults, then a JSON file, then `--set` flags.
//! Every run writes its resolved configuration to a manifest before any
//! compute, and a manifest can be fed back as `--config` to repeat the run.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use krrst_core::bundle::{create_dir, read_json, write_json};
use krrst_core::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Identifies the binary that produced a run.
pub fn build_id() -> String {
    format!(
        "krrst {} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("KRRST_BUILD_ID").unwrap_or("local")
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub build: String,
    /// Input paths by role.
    pub inputs: Map<String, Value>,
    pub config: Value,
}

/// Recursively overlays `patch` onto `base`. Keys absent from `base` are
/// rejected so that typos surface as configuration errors.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        // A tagged enum switching variant replaces the whole object.
        (Value::Object(b), Value::Object(p))
            if ["kind", "mode"].iter().any(|t| p.get(*t).is_some_and(|v| b.get(*t) != Some(v))) =>
        {
            *b = p.clone();
            Ok(())
        }
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::config(format!("unknown configuration key `{sub}`"))),
                }
            }
            Ok(())
        }
        // Enum-like values (tagged objects, strings) and arrays are replaced whole.
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses, else a string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{text}` is not key=value")))?;
    if key.is_empty() {
        return Err(Error::config(format!("override `{text}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(root: &mut Value, keys: &[String], value: Value) -> Result<()> {
    let mut slot = root;
    for (i, k) in keys.iter().enumerate() {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(k))
            .ok_or_else(|| Error::config(format!("unknown configuration key `{}`", keys[..=i].join("."))))?;
    }
    *slot = value;
    Ok(())
}

/// Reads a config file, unwrapping a run manifest when given one.
pub fn read_config_file(path: &Path, command: &str) -> Result<Value> {
    let value: Value = read_json(path)?;
    if value.get("manifest_version").is_some() {
        let manifest: RunManifest =
            serde_json::from_value(value).map_err(|e| Error::config(format!("bad run manifest: {e}")))?;
        if manifest.command != command {
            return Err(Error::config(format!(
                "manifest was written by `{}`, not `{command}`",
                manifest.command
            )));
        }
        return Ok(manifest.config);
    }
    Ok(value)
}

/// Defaults ← file ← overrides, deserialized into `T`.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    command: &str,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| Error::config(e.to_string()))?;
    if let Some(path) = file {
        merge(&mut value, &read_config_file(path, command)?, "")?;
    }
    for text in overrides {
        let (keys, v) = parse_override(text)?;
        apply_override(&mut value, &keys, v)?;
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

/// Writes the manifest into `out` and returns its path.
pub fn write_manifest<T: Serialize>(out: &Path, command: &str, inputs: &[(&str, &Path)], config: &T) -> Result<PathBuf> {
    create_dir(out)?;
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        command: command.to_string(),
        build: build_id(),
        inputs: inputs
            .iter()
            .map(|(k, p)| (k.to_string(), Value::String(p.display().to_string())))
            .collect(),
        config: serde_json::to_value(config).map_err(|e| Error::config(e.to_string()))?,
    };
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}
