//! Typed lookups into a TOML document. Errors name the dotted field path.

use std::path::Path;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Config {
    root: Value,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        Ok(Self { root })
    }

    /// Hex SHA-256 of the document serialized as key-sorted compact JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_value(&self.root).expect("TOML values map to JSON");
        let canon = serde_json::to_string(&json).expect("JSON serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.root).expect("TOML values map to JSON")
    }

    pub fn get(&self, path: &str) -> Option<&Value> {
        let mut cur = &self.root;
        for part in path.split('.') {
            cur = cur.as_table()?.get(part)?;
        }
        Some(cur)
    }

    pub fn has(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    fn wrong(path: &str, want: &str, v: &Value) -> Error {
        Error::config(path, format!("expected {want}, found {}", type_name(v)))
    }

    pub fn opt_f64(&self, path: &str) -> Result<Option<f64>> {
        match self.get(path) {
            None => Ok(None),
            Some(v) => as_f64(v).map(Some).ok_or_else(|| Self::wrong(path, "a number", v)),
        }
    }

    pub fn f64(&self, path: &str) -> Result<f64> {
        self.opt_f64(path)?.ok_or_else(|| Error::config(path, "missing required field"))
    }

    pub fn f64_or(&self, path: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(path)?.unwrap_or(default))
    }

    pub fn opt_u64(&self, path: &str) -> Result<Option<u64>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(Value::Integer(i)) => Err(Error::config(path, format!("must be nonnegative, got {i}"))),
            Some(v) => Err(Self::wrong(path, "an integer", v)),
        }
    }

    pub fn u64(&self, path: &str) -> Result<u64> {
        self.opt_u64(path)?.ok_or_else(|| Error::config(path, "missing required field"))
    }

    pub fn u64_or(&self, path: &str, default: u64) -> Result<u64> {
        Ok(self.opt_u64(path)?.unwrap_or(default))
    }

    pub fn opt_str(&self, path: &str) -> Result<Option<&str>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Self::wrong(path, "a string", v)),
        }
    }

    pub fn str(&self, path: &str) -> Result<&str> {
        self.opt_str(path)?.ok_or_else(|| Error::config(path, "missing required field"))
    }

    pub fn str_or<'a>(&'a self, path: &str, default: &'a str) -> Result<&'a str> {
        Ok(self.opt_str(path)?.unwrap_or(default))
    }

    pub fn bool_or(&self, path: &str, default: bool) -> Result<bool> {
        match self.get(path) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(Self::wrong(path, "a boolean", v)),
        }
    }

    pub fn opt_f64_vec(&self, path: &str) -> Result<Option<Vec<f64>>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(i, v)| as_f64(v).ok_or_else(|| Self::wrong(&format!("{path}[{i}]"), "a number", v)))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::wrong(path, "an array of numbers", v)),
        }
    }

    pub fn opt_str_vec(&self, path: &str) -> Result<Option<Vec<String>>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::String(s) => Ok(s.clone()),
                    other => Err(Self::wrong(&format!("{path}[{i}]"), "a string", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::wrong(path, "an array of strings", v)),
        }
    }

    /// Rows of a numeric matrix.
    pub fn opt_matrix(&self, path: &str) -> Result<Option<Vec<Vec<f64>>>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::Array(rows)) => rows
                .iter()
                .enumerate()
                .map(|(i, row)| match row {
                    Value::Array(a) => a
                        .iter()
                        .enumerate()
                        .map(|(j, v)| as_f64(v).ok_or_else(|| Self::wrong(&format!("{path}[{i}][{j}]"), "a number", v)))
                        .collect(),
                    other => Err(Self::wrong(&format!("{path}[{i}]"), "an array", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::wrong(path, "an array of arrays", v)),
        }
    }
}
