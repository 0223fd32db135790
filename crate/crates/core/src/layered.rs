//! Layered configuration: defaults < TOML file < environment < flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Overlays `file`, then variables named `{env_prefix}A__B` (setting `a.b`),
/// then `a.b=value` flags onto `base`. Unknown keys are rejected by name.
pub fn layered<T, I>(base: &T, file: Option<&Path>, env_prefix: &str, env: I, flags: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    I: IntoIterator<Item = (String, String)>,
{
    let mut value = toml::Value::try_from(base).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: toml::Value = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        merge(&mut value, overlay);
    }
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(env_prefix).map(|k| (k.to_lowercase().replace("__", "."), v)))
        .collect();
    env.sort();
    for (k, v) in env {
        set_dotted(&mut value, &k, &v)?;
    }
    for flag in flags {
        let (k, v) = flag
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{flag}` is not key=value")))?;
        set_dotted(&mut value, k.trim(), v.trim())?;
    }
    value.try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_scalar(raw));
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::config("empty override key"))
}
