//! Layered command configuration: a TOML file, then `key=value` overrides,
//! then strict deserialization that reports the failing field path.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Invalid or unreadable configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads `file` (if any), applies `overrides` and deserializes the result.
pub fn load<T: DeserializeOwned>(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<T> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| err(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| err(format!("config {} is not valid TOML: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { String::new() } else { format!(" at `{path}`") };
        err(format!("config error{at}: {}", e.inner().message()))
    })
}

/// Deserializes a JSON snapshot (as stored in a manifest).
pub fn from_json<T: DeserializeOwned>(value: &serde_json::Value) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| err(format!("manifest config error at `{}`: {}", e.path(), e.inner())))
}

/// Sets a dotted key. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| err(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(err(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
