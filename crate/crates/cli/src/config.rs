//! JSON configuration loading with preset expansion.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

use scaresnet_core::backbone::{BackboneConfig, Preset};

/// Overlay `patch` onto `base`, recursing into objects.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A backbone document: fields given override those of its `preset`
/// (default `mini`).
pub fn backbone_from_value(v: Value) -> Result<BackboneConfig> {
    let preset: Preset = match v.get("preset") {
        Some(p) => serde_json::from_value(p.clone()).context("unknown preset")?,
        None => Preset::Mini,
    };
    let mut base = serde_json::to_value(preset.config())?;
    merge(&mut base, v);
    serde_json::from_value(base).context("invalid backbone config")
}

pub fn read_json(path: &Path) -> Result<Value> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

/// Deserialize `T` from the optional file, with `defaults` beneath it.
pub fn load<T: DeserializeOwned + serde::Serialize>(path: Option<&Path>, defaults: &T) -> Result<T> {
    let mut base = serde_json::to_value(defaults)?;
    if let Some(p) = path {
        merge(&mut base, read_json(p)?);
    }
    Ok(serde_json::from_value(base)?)
}
