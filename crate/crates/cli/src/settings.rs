//! Resolution of command settings: defaults, then the `--config` file, then flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use vqbridge::trainkit::{merge_pairs, parse_config};

use crate::error::{CliError, CliResult};

/// Fully resolved `key -> value` settings of one run.
pub type Settings = BTreeMap<String, String>;

fn to_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

/// Non-null fields of a serializable struct as `key=value` pairs.
pub fn pairs_of<T: Serialize>(value: &T) -> Vec<(String, String)> {
    match serde_json::to_value(value).expect("settings serialize") {
        Value::Object(map) => map.iter().filter_map(|(k, v)| Some((k.clone(), to_text(v)?))).collect(),
        _ => Vec::new(),
    }
}

pub fn read_config(path: Option<&Path>) -> CliResult<Vec<(String, String)>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), CliError::from(e).message)))
}

/// Layers `defaults < file < flags`, rejecting keys outside `known` and
/// reporting missing `required` keys.
pub fn resolve(
    defaults: Vec<(String, String)>,
    file: Vec<(String, String)>,
    flags: Vec<(String, String)>,
    known: &[&str],
    required: &[&str],
) -> CliResult<Settings> {
    for (k, _) in file.iter().chain(&flags) {
        if !known.contains(&k.as_str()) {
            return Err(CliError::usage(format!(
                "unknown setting {k:?} (expected one of: {})",
                known.join(", ")
            )));
        }
    }
    let merged: Settings = merge_pairs(&[defaults, file, flags]).into_iter().collect();
    for r in required {
        if merged.get(*r).is_none_or(|v| v.is_empty()) {
            return Err(CliError::usage(format!("missing required setting --{}", r.replace('_', "-"))));
        }
    }
    Ok(merged)
}

pub fn get<T: FromStr>(s: &Settings, key: &str) -> CliResult<T> {
    let raw = s
        .get(key)
        .ok_or_else(|| CliError::usage(format!("missing setting {key}")))?;
    raw.trim()
        .parse()
        .map_err(|_| CliError::usage(format!("invalid value {raw:?} for {key}")))
}

/// `None` for an absent or empty value.
pub fn get_opt<T: FromStr>(s: &Settings, key: &str) -> CliResult<Option<T>> {
    match s.get(key).map(|v| v.trim()) {
        None | Some("") => Ok(None),
        Some(_) => get(s, key).map(Some),
    }
}

fn to_json(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return Value::Number(n);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}

/// Builds `T` from the settings named by `T`'s own fields.
pub fn typed<T: Serialize + DeserializeOwned + Default>(s: &Settings) -> CliResult<T> {
    let mut obj = serde_json::Map::new();
    for (k, _) in pairs_of(&T::default()) {
        if let Some(v) = s.get(&k) {
            obj.insert(k, to_json(v));
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::usage(format!("invalid settings: {e}")))
}
