//! Layered settings: built-in defaults, then a TOML file, then command-line
//! overrides. Every key is checked against the defaults so typos fail early.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Parses `key=value` with the value read as a TOML scalar or array; bare words
/// fall back to strings.
pub fn parse_assignment(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("expected KEY=VALUE, got `{raw}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::usage(format!("empty key in `{raw}`")));
    }
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => to_json(t.remove("v").expect("key present"))?,
        Err(_) => Value::String(value.trim().to_owned()),
    };
    Ok((key.to_owned(), parsed))
}

fn to_json<T: Serialize>(v: T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::usage(e.to_string()))
}

pub fn read_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match to_json(table)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("a TOML table serializes to an object"),
    }
}

fn suggestion(key: &str, known: &Map<String, Value>) -> String {
    known
        .keys()
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .min()
        .filter(|(d, k)| *d <= (k.len().max(key.len()) / 2).max(2))
        .map(|(_, k)| format!("; did you mean `{k}`?"))
        .unwrap_or_default()
}

fn unknown(path: &str, key: &str, known: &Map<String, Value>) -> CliError {
    let full = if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    };
    CliError::usage(format!("unknown config key `{full}`{}", suggestion(key, known)))
}

/// Overlays `layer` onto `base`, refusing keys `base` does not have. Nested
/// tables merge key by key; everything else is replaced.
fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>, path: &str) -> Result<(), CliError> {
    for (k, v) in layer {
        let Some(slot) = base.get_mut(&k) else {
            return Err(unknown(path, &k, base));
        };
        match (slot, v) {
            (Value::Object(inner), Value::Object(sub)) => {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                overlay(inner, sub, &p)?;
            }
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

/// Sets a dotted key such as `jitter.rotation_deg`.
fn set_dotted(base: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut map = base;
    let mut path = String::new();
    for p in parts {
        let next = match map.get(p) {
            Some(Value::Object(_)) => map.get_mut(p),
            _ => return Err(unknown(&path, p, map)),
        };
        let Some(Value::Object(inner)) = next else { unreachable!() };
        path = if path.is_empty() { p.to_owned() } else { format!("{path}.{p}") };
        map = inner;
    }
    if !map.contains_key(last) {
        return Err(unknown(&path, last, map));
    }
    map.insert(last.to_owned(), value);
    Ok(())
}

/// Merges `defaults`, an optional file and overrides, in that order.
pub fn resolve_map(
    mut merged: Map<String, Value>,
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<Map<String, Value>, CliError> {
    if let Some(path) = file {
        overlay(&mut merged, read_file(path)?, "")?;
    }
    for (k, v) in overrides {
        set_dotted(&mut merged, k, v.clone())?;
    }
    Ok(merged)
}

pub fn to_map<T: Serialize>(value: &T) -> Result<Map<String, Value>, CliError> {
    match to_json(value)? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::usage("settings must be a table".into())),
    }
}

pub fn from_map<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

/// Resolves `T` from its defaults, an optional file and overrides, in that order.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<T, CliError> {
    from_map(resolve_map(to_map(defaults)?, file, overrides)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Demo {
        epochs: usize,
        rate: f64,
        name: Option<String>,
        inner: Inner,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Inner {
        depth: u32,
    }

    fn demo() -> Demo {
        Demo {
            epochs: 10,
            rate: 0.5,
            name: None,
            inner: Inner { depth: 1 },
        }
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 20\nrate = 1\n[inner]\ndepth = 3\n").unwrap();
        let sets = vec![parse_assignment("epochs=30").unwrap(), parse_assignment("name=run").unwrap()];
        let got: Demo = resolve(&demo(), Some(&path), &sets).unwrap();
        assert_eq!(
            got,
            Demo {
                epochs: 30,
                rate: 1.0,
                name: Some("run".into()),
                inner: Inner { depth: 3 }
            }
        );
    }

    #[test]
    fn typo_names_the_nearest_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epohcs = 20\n").unwrap();
        let err = resolve(&demo(), Some(&path), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`epohcs`") && msg.contains("`epochs`"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        let err = resolve(&demo(), None, &[parse_assignment("inner.dpeth=2").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("`inner.dpeth`"));
    }

    #[test]
    fn wrong_types_are_usage_errors() {
        let err = resolve(&demo(), None, &[parse_assignment("epochs=fast").unwrap()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
