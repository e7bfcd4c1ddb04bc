//! JSON config files with `key=value` overrides.

use std::fs;
use std::path::Path;

use dmil::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Splits `a.b.c=value` into its key path and value. The value is read as
/// JSON when it parses, as a plain string otherwise.
pub fn parse_override(item: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {item:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "cannot set {}: {} is not an object",
                path.join("."),
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads a JSON object from `path` (or starts from `default`), applies the
/// overrides and deserializes it. Unknown keys are configuration errors.
pub fn load<T: DeserializeOwned + Serialize>(
    path: Option<&Path>,
    default: Option<&T>,
    overrides: &[String],
) -> Result<T> {
    let mut value = match (path, default) {
        (Some(p), _) => read_value(p)?,
        (None, Some(d)) => serde_json::to_value(d)?,
        (None, None) => Value::Object(Map::new()),
    };
    for item in overrides {
        let (key, v) = parse_override(item)?;
        apply(&mut value, &key, v)?;
    }
    let what = path
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "configuration".into());
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{what}: {e}")))
}

pub fn read_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "config file".into(),
        },
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
