//! Layered run configuration: JSON file, then command-line overrides, then the
//! `CLOP_SEED` fallback for an unset seed.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::failure::{Failure, Outcome};

pub const SEED_ENV: &str = "CLOP_SEED";

/// Raw key/value layers prior to typed parsing.
#[derive(Debug, Default)]
pub struct Layers {
    map: Map<String, Value>,
    out: Option<PathBuf>,
}

impl Layers {
    /// Reads a config file; an `"out"` key is taken as the output directory.
    pub fn from_file(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(mut map) = value else {
            return Err(Failure::usage("config must be a JSON object"));
        };
        let out = match map.remove("out") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(Failure::usage("config field `out` must be a string")),
        };
        Ok(Self { map, out })
    }

    pub fn set(&mut self, key: &str, value: Option<impl Into<Value>>) {
        if let Some(v) = value {
            self.map.insert(key.to_string(), v.into());
        }
    }

    /// Sets `parent.key`, creating the nested object if needed.
    pub fn set_nested(&mut self, parent: &str, key: &str, value: Option<impl Into<Value>>) -> Outcome {
        let Some(v) = value else {
            return Ok(());
        };
        let slot = self
            .map
            .entry(parent.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        match slot {
            Value::Object(inner) => {
                inner.insert(key.to_string(), v.into());
                Ok(())
            }
            _ => Err(Failure::usage(format!("config field `{parent}` must be an object"))),
        }
    }

    pub fn set_out(&mut self, out: Option<PathBuf>) {
        if out.is_some() {
            self.out = out;
        }
    }

    /// Uses `CLOP_SEED` when neither the file nor a flag chose a seed.
    pub fn seed_fallback(&mut self) -> Outcome {
        if self.map.contains_key("seed") {
            return Ok(());
        }
        if let Some(seed) = env_seed()? {
            self.map.insert("seed".into(), seed.into());
        }
        Ok(())
    }

    /// The typed config and the output location, if one was given.
    pub fn parse<T: DeserializeOwned>(self) -> Outcome<(T, Option<PathBuf>)> {
        let cfg = serde_json::from_value(Value::Object(self.map))
            .map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
        Ok((cfg, self.out))
    }
}

pub fn require_out(out: Option<PathBuf>) -> Outcome<PathBuf> {
    out.ok_or_else(|| Failure::usage("missing output location: pass --out or set `out` in the config"))
}

pub fn env_seed() -> Outcome<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV} must be a non-negative integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}
