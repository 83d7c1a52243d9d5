//! Versioned `key = value` configuration text with dotted keys.
//!
//! Any serde-serializable config struct maps onto flat dotted keys, for
//! example `student.alpha = 1` or `data.shift.brightness = 0.2`. Reading
//! starts from the struct's defaults, applies the file, then applies
//! overrides; keys absent from the defaults are rejected.
//!
//! ```
//! use aird::config;
//! use serde::{Deserialize, Serialize};
//!
//! #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
//! struct Inner { rate: f64 }
//! #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
//! struct Cfg { epochs: usize, inner: Inner }
//!
//! let text = "# demo 1\nepochs = 3\n";
//! let over = vec![config::parse_override("inner.rate=0.5").unwrap()];
//! let cfg: Cfg = config::from_text("demo 1", Some(text), &over).unwrap();
//! assert_eq!(cfg, Cfg { epochs: 3, inner: Inner { rate: 0.5 } });
//! ```

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};

fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(child, &key, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn format_leaf(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(format_leaf).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn guess(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<u64>() {
        Value::from(i)
    } else if let Ok(i) = raw.parse::<i64>() {
        Value::from(i)
    } else if let Some(n) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
        Value::Number(n)
    } else {
        Value::String(raw.to_string())
    }
}

fn parse_leaf(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot read {raw:?} as {}", kind(like)));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => Value::Number(
            raw.parse::<f64>()
                .ok()
                .and_then(Number::from_f64)
                .ok_or_else(bad)?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let parts = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
            match items.first() {
                Some(first) => Value::Array(
                    parts
                        .map(|p| parse_leaf(key, p, first))
                        .collect::<Result<_>>()?,
                ),
                None => Value::Array(parts.map(guess).collect()),
            }
        }
        Value::Null if raw == "none" => Value::Null,
        Value::Null => guess(raw),
        Value::Object(_) => return Err(bad()),
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::String(_) => "text",
        Value::Array(_) => "a comma-separated list",
        Value::Null => "a value or `none`",
        Value::Object(_) => "a section",
    }
}

fn set_path(root: &mut Value, key: &str, leaf: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .expect("path exists in defaults")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .expect("path exists in defaults")
        .insert(parts[parts.len() - 1].to_string(), leaf);
}

/// Splits `dotted.key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!(
            "override {s:?} is not of the form key=value"
        ))),
    }
}

/// Renders every key of `v` in sorted order under a `# header` line.
pub fn to_text<T: Serialize>(header: &str, v: &T) -> Result<String> {
    let mut flat = BTreeMap::new();
    flatten(&serde_json::to_value(v)?, "", &mut flat);
    let mut s = format!("# {header}\n");
    for (k, leaf) in flat {
        s.push_str(&format!("{k} = {}\n", format_leaf(&leaf)));
    }
    Ok(s)
}

/// Builds a config from defaults, then `text` (if any), then `overrides`.
pub fn from_text<T>(header: &str, text: Option<&str>, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut root = serde_json::to_value(T::default())?;
    let mut known = BTreeMap::new();
    flatten(&root, "", &mut known);

    let mut entries: Vec<(String, String)> = Vec::new();
    if let Some(text) = text {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == format!("# {header}") => {}
            Some((_, l)) => {
                return Err(Error::Config(format!(
                    "config header {:?} does not match expected \"# {header}\"",
                    l.trim()
                )))
            }
            None => return Err(Error::Config("config file is empty".into())),
        }
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`", n + 1))
            })?;
            let k = k.trim().to_string();
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!(
                    "config line {}: duplicate key {k}",
                    n + 1
                )));
            }
            entries.push((k, v.trim().to_string()));
        }
    }
    entries.extend(overrides.iter().cloned());

    for (k, raw) in &entries {
        let like = known
            .get(k)
            .ok_or_else(|| Error::Config(format!("unknown config key {k}")))?;
        let leaf = parse_leaf(k, raw, like)?;
        set_path(&mut root, k, leaf);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid config: {e}")))
}
