//! Layered configuration: defaults < TOML file < `XAGG_*` environment < flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "XAGG_";

/// Raw layers before merging. `file` is the whole parsed TOML document.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub file: Option<Value>,
    pub env: BTreeMap<String, String>,
    pub flags: Value,
}

impl Layers {
    pub fn from_process(config: Option<&Path>, flags: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            file: config.map(read_toml).transpose()?,
            env: std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect(),
            flags: serde_json::to_value(flags)?,
        })
    }
}

pub fn read_toml(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let doc: toml::Value = toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(serde_json::to_value(doc)?)
}

/// Resolves the config of `command`. Top-level scalar keys of the file apply
/// to every command that has them; the `[command]` table overrides them.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(command: &str, layers: &Layers) -> CliResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(T::default())? else {
        return Err(CliError::runtime(format!("{command} config is not a table")));
    };
    let known: Vec<String> = merged.keys().cloned().collect();

    if let Some(Value::Object(file)) = &layers.file {
        for (k, v) in file {
            if !v.is_object() && merged.contains_key(k) {
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Some(section) = file.get(command) {
            let Value::Object(section) = section else {
                return Err(CliError::usage(format!("config entry [{command}] must be a table")));
            };
            if let Some(bad) = section.keys().find(|k| !known.contains(k)) {
                return Err(CliError::usage(format!("unknown key {bad:?} in config section [{command}]")));
            }
            overlay(&mut merged, section);
        }
    }

    for key in &known {
        if let Some(raw) = layers.env.get(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
            let v = env_value(merged.get(key), raw);
            merged.insert(key.clone(), v);
        }
    }

    if let Value::Object(flags) = &layers.flags {
        overlay(&mut merged, &strip_nulls(flags));
    }

    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("{command} config: {e}")))
}

fn overlay(base: &mut Map<String, Value>, top: &Map<String, Value>) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Object(b)), Value::Object(t)) => overlay(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn strip_nulls(m: &Map<String, Value>) -> Map<String, Value> {
    m.iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| match v {
            Value::Object(inner) => (k.clone(), Value::Object(strip_nulls(inner))),
            _ => (k.clone(), v.clone()),
        })
        .collect()
}

/// String-typed settings keep the raw text; anything else is read as JSON
/// when possible so `XAGG_SEED=3` becomes a number.
fn env_value(current: Option<&Value>, raw: &str) -> Value {
    if matches!(current, Some(Value::String(_))) {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Comma-separated list, trimmed, empty entries dropped.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

/// Deserializes `"a,b"` or `["a", "b"]` into a list.
pub fn list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::One(s) => split_list(&s),
        Raw::Many(v) => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        seed: u64,
        name: String,
        lr: Option<f64>,
    }

    fn layers(file: &str, env: &[(&str, &str)], flags: Value) -> Layers {
        let doc: toml::Value = toml::from_str(file).unwrap();
        Layers {
            file: Some(serde_json::to_value(doc).unwrap()),
            env: env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            flags,
        }
    }

    #[test]
    fn precedence_is_flags_then_env_then_file() {
        let l = layers("seed = 1\n[demo]\nname = \"file\"\nlr = 0.5\n", &[("XAGG_NAME", "42")], serde_json::json!({"lr": 0.1, "seed": null}));
        let d: Demo = resolve("demo", &l).unwrap();
        assert_eq!(
            d,
            Demo {
                seed: 1,
                name: "42".into(),
                lr: Some(0.1)
            }
        );
    }

    #[test]
    fn unknown_section_keys_are_usage_errors() {
        let l = layers("[demo]\nsede = 3\n", &[], Value::Null);
        assert!(resolve::<Demo>("demo", &l).is_err());
    }

    #[test]
    fn lists_split_on_commas() {
        assert_eq!(split_list(" sm, gb,,lrp "), vec!["sm", "gb", "lrp"]);
    }
}
