//! Name-keyed strategy registries.
//!
//! Every interchangeable piece of a scenario (Lagrangian model, diffusion
//! vector fields, terminal cost, regression basis) sits behind a trait and is
//! constructed at runtime from a name plus a parameter table. The CLI config
//! only ever talks to these registries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single scalar or vector parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    List(Vec<f64>),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Text(s) => write!(f, "{s:?}"),
            ParamValue::List(v) => write!(f, "{v:?}"),
        }
    }
}

/// Parameter table handed to a strategy constructor.
///
/// Constructors pull the keys they understand; [`Params::finish`] then rejects
/// anything left over so typos in a config surface as errors.
#[derive(Debug, Clone, Default)]
pub struct Params {
    values: BTreeMap<String, ParamValue>,
    consumed: std::cell::RefCell<BTreeSet<String>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<ParamValue>) -> Self {
        self.values.insert(key.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, key: &str, value: impl Into<ParamValue>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn from_map(values: BTreeMap<String, ParamValue>) -> Self {
        Self {
            values,
            consumed: Default::default(),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn take(&self, key: &str) -> Option<&ParamValue> {
        let v = self.values.get(key);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(ParamValue::Float(x)) => Ok(*x),
            Some(ParamValue::Int(i)) => Ok(*i as f64),
            Some(other) => Err(Error::InvalidParameter(format!(
                "'{key}' must be a number, got {other}"
            ))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(ParamValue::Int(i)) if *i >= 0 => Ok(*i as usize),
            Some(other) => Err(Error::InvalidParameter(format!(
                "'{key}' must be a non-negative integer, got {other}"
            ))),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String> {
        match self.take(key) {
            None => Ok(default.to_string()),
            Some(ParamValue::Text(s)) => Ok(s.clone()),
            Some(other) => Err(Error::InvalidParameter(format!(
                "'{key}' must be a string, got {other}"
            ))),
        }
    }

    pub fn list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(ParamValue::List(v)) => Ok(v.clone()),
            Some(ParamValue::Float(x)) => Ok(vec![*x]),
            Some(ParamValue::Int(i)) => Ok(vec![*i as f64]),
            Some(other) => Err(Error::InvalidParameter(format!(
                "'{key}' must be a list of numbers, got {other}"
            ))),
        }
    }

    /// Fails if any key was never read by the constructor.
    pub fn finish(&self, owner: &str) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "unknown parameter(s) for {owner}: {}",
                unknown.join(", ")
            )))
        }
    }
}

impl From<f64> for ParamValue {
    fn from(x: f64) -> Self {
        ParamValue::Float(x)
    }
}
impl From<i64> for ParamValue {
    fn from(x: i64) -> Self {
        ParamValue::Int(x)
    }
}
impl From<usize> for ParamValue {
    fn from(x: usize) -> Self {
        ParamValue::Int(x as i64)
    }
}
impl From<bool> for ParamValue {
    fn from(x: bool) -> Self {
        ParamValue::Bool(x)
    }
}
impl From<&str> for ParamValue {
    fn from(x: &str) -> Self {
        ParamValue::Text(x.to_string())
    }
}
impl From<Vec<f64>> for ParamValue {
    fn from(x: Vec<f64>) -> Self {
        ParamValue::List(x)
    }
}

pub type Constructor<T> = fn(&Params) -> Result<Box<T>>;

struct Entry<T: ?Sized> {
    name: &'static str,
    summary: &'static str,
    build: Constructor<T>,
}

/// Strategies of one family, keyed by name.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<Entry<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, summary: &'static str, build: Constructor<T>) {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate {} '{name}'",
            self.kind
        );
        self.entries.push(Entry {
            name,
            summary,
            build,
        });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|e| (e.name, e.summary)).collect()
    }

    pub fn build(&self, name: &str, params: &Params) -> Result<Box<T>> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        let built = (entry.build)(params)?;
        params.finish(&format!("{} '{name}'", self.kind))?;
        Ok(built)
    }
}
