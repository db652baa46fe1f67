//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Resolve a command's configuration. `file` may be a plain JSON object of
/// config keys or a run manifest written by an earlier run of `command`.
pub fn resolve<C>(command: &str, file: Option<&Path>, flags: &impl Serialize) -> Result<C>
where
    C: Default + Serialize + DeserializeOwned,
{
    let mut merged = serde_json::to_value(C::default())?;
    let base = merged.as_object_mut().expect("configs serialize to objects");
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let (Some(cmd), Some(cfg)) = (value.get("command"), value.get("config")) {
            if cmd != command {
                bail!("{} is a manifest of `{cmd}`, not `{command}`", path.display());
            }
            value = cfg.clone();
        }
        let Value::Object(map) = value else {
            bail!("config {} must hold a JSON object", path.display());
        };
        for (key, v) in map {
            if !base.contains_key(&key) {
                bail!("unknown config key {key:?} for `{command}`");
            }
            base.insert(key, v);
        }
    }
    if let Value::Object(map) = serde_json::to_value(flags)? {
        for (key, v) in map {
            if !v.is_null() {
                base.insert(key, v);
            }
        }
    }
    serde_json::from_value(merged).with_context(|| format!("invalid configuration for `{command}`"))
}
