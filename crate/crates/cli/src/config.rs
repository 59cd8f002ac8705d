//! Flat dotted-key JSON configs: `{"loss.gamma": 0.9, "lattice.resolution": [5, 5, 5]}`.
//!
//! A config struct is flattened to dotted keys, the file's keys and then the
//! command-line overrides are applied on top, and the result is rebuilt.
//! Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub type Flat = Map<String, Value>;

pub fn flatten(value: &Value) -> Flat {
    let mut out = Map::new();
    flatten_into("", value, &mut out);
    out
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Flat) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            let slot = node.entry(p.to_string()).or_insert(Value::Null);
            if !slot.is_object() {
                *slot = Value::Object(Map::new());
            }
            node = slot.as_object_mut().unwrap();
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

pub fn read_flat(path: &Path) -> Result<Flat, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("--config: cannot read {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Validation(format!("--config: {} must hold a JSON object", path.display()))),
        Err(e) => Err(CliError::Validation(format!("--config: {} is not valid JSON: {e}", path.display()))),
    }
}

/// Applies `file` then `overrides` to `base`. Each override carries the flag it came
/// from so errors can name it.
pub fn merge<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Flat>,
    overrides: &[(&'static str, &'static str, Value)],
) -> Result<T, CliError> {
    let mut flat = flatten(&serde_json::to_value(base).expect("config serializes"));
    let known: Vec<String> = flat.keys().cloned().collect();
    // Optional sub-objects serialize as null; keys below them are also legal.
    let accepts = |key: &str| known.iter().any(|k| k == key || key.starts_with(&format!("{k}.")));
    if let Some(file) = file {
        for (k, v) in file {
            if !accepts(k) {
                return Err(CliError::Validation(format!("--config: unknown key {k:?}")));
            }
            flat.insert(k.clone(), v.clone());
        }
    }
    let rebuild = |flat: &Flat| serde_json::from_value::<T>(unflatten(flat));
    rebuild(&flat).map_err(|e| CliError::Validation(format!("--config: {e}")))?;
    for (key, flag, v) in overrides {
        flat.insert(key.to_string(), v.clone());
        rebuild(&flat).map_err(|e| CliError::Validation(format!("{flag}: {e}")))?;
    }
    Ok(rebuild(&flat).expect("checked above"))
}

/// Prefixes a validation message with the flag whose key it mentions.
pub fn name_flag(msg: String, flags: &[(&'static str, &'static str)]) -> String {
    for (key, flag) in flags {
        if msg.contains(key.rsplit('.').next().unwrap()) {
            return format!("{flag}: {msg}");
        }
    }
    msg
}

pub fn write_flat<T: Serialize>(path: &Path, cfg: &T) -> Result<(), CliError> {
    let flat = flatten(&serde_json::to_value(cfg).expect("config serializes"));
    let mut text = serde_json::to_string_pretty(&Value::Object(flat)).expect("json");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        gamma: f64,
        res: [usize; 3],
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        name: String,
        loss: Inner,
    }

    fn base() -> Outer {
        Outer { name: "a".into(), loss: Inner { gamma: 0.9, res: [5, 5, 5] } }
    }

    #[test]
    fn flatten_round_trips() {
        let v = serde_json::to_value(base()).unwrap();
        let flat = flatten(&v);
        assert_eq!(flat["loss.gamma"], json!(0.9));
        assert_eq!(flat["loss.res"], json!([5, 5, 5]));
        assert_eq!(unflatten(&flat), v);
    }

    #[test]
    fn flags_override_file() {
        let file: Flat = serde_json::from_value(json!({"loss.gamma": 0.5, "name": "b"})).unwrap();
        let merged: Outer = merge(&base(), Some(&file), &[("loss.gamma", "--gamma", json!(0.1))]).unwrap();
        assert_eq!(merged.loss.gamma, 0.1);
        assert_eq!(merged.name, "b");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let file: Flat = serde_json::from_value(json!({"loss.gama": 0.5})).unwrap();
        let err = merge(&base(), Some(&file), &[]).unwrap_err();
        assert!(err.to_string().contains("loss.gama"));
    }

    #[test]
    fn bad_type_names_the_flag() {
        let err = merge(&base(), None, &[("loss.gamma", "--gamma", json!("high"))]).unwrap_err();
        assert!(err.to_string().starts_with("--gamma"), "{err}");
    }
}
