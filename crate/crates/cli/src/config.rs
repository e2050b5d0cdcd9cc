//! Layered JSON configuration: built-in defaults, then an optional config
//! file, then dedicated flags, then `--set key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use synicl::{Error, Result};

/// Recursively merge `top` into `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// `a.b.c=value` as a nested object. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn parse_set(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(nest(key, value))
}

pub fn nest(key: &str, value: Value) -> Value {
    key.rsplit('.').fold(value, |acc, part| {
        let mut m = Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    })
}

/// User-supplied layers (file, flags, overrides) merged into one object.
pub fn user_layers(file: Option<&Path>, flags: Vec<(&str, Value)>, sets: &[String]) -> Result<Value> {
    let mut v = Value::Object(Map::new());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut v, parsed);
    }
    for (k, val) in flags {
        merge(&mut v, nest(k, val));
    }
    for s in sets {
        merge(&mut v, parse_set(s)?);
    }
    Ok(v)
}

/// Deserialize `defaults` overlaid with `user`, rejecting unknown keys.
pub fn resolve<T: DeserializeOwned>(mut defaults: Value, user: Value) -> Result<T> {
    merge(&mut defaults, user);
    serde_json::from_value(defaults).map_err(|e| Error::Config(e.to_string()))
}

/// A field of the user layers, if present.
pub fn peek<'a>(user: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(user, |v, k| v.get(k))
}
