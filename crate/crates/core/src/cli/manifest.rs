//! Run manifests, config merging and hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parsed `key=value` override; dotted keys address nested objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("override {s:?} has an empty key segment")));
        }
        // Bare words that are not JSON are taken as strings.
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            path: key.split('.').map(str::to_string).collect(),
            value,
        })
    }
}

impl Override {
    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Override {
            path: key.split('.').map(str::to_string).collect(),
            value: value.into(),
        }
    }

    fn apply(&self, root: &mut Value) -> Result<()> {
        let mut node = root;
        for (depth, key) in self.path.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override {}: {} is not an object", self.path.join("."), self.path[..depth].join(".")))
            })?;
            if depth + 1 == self.path.len() {
                obj.insert(key.clone(), self.value.clone());
                return Ok(());
            }
            node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        }
        Ok(())
    }
}

/// Read an optional JSON config, fill in defaults, apply overrides in order, and parse into `T`.
///
/// Returns the parsed config and its fully expanded JSON form (defaults filled in).
pub fn load_config<T: DeserializeOwned + Serialize>(path: Option<&Path>, overrides: &[Override]) -> Result<(T, Value)> {
    let root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(format!("config {}", p.display()), e))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    // Expand defaults first so nested overrides land on complete objects.
    let parsed: T = serde_json::from_value(root).map_err(|e| Error::json("config", e))?;
    let mut root = serde_json::to_value(&parsed).map_err(|e| Error::json("config", e))?;
    for o in overrides {
        o.apply(&mut root)?;
    }
    let config: T = serde_json::from_value(root).map_err(|e| Error::json("effective config", e))?;
    let effective = serde_json::to_value(&config).map_err(|e| Error::json("effective config", e))?;
    Ok((config, effective))
}

/// SHA-256 of the canonical (key-sorted, compact) JSON text.
pub fn config_hash(value: &Value) -> String {
    // serde_json's default map is ordered by key, so `to_string` is canonical.
    let text = serde_json::to_string(value).expect("JSON values serialise");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: Value,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects output files as they are written, then writes the manifest last.
#[derive(Debug)]
pub struct RunRecorder {
    pub out_dir: PathBuf,
    command: String,
    config: Value,
    seed: u64,
    started_at: String,
    outputs: Vec<String>,
    inputs: Vec<String>,
}

impl RunRecorder {
    pub fn new(out_dir: &Path, command: &str, config: Value, seed: u64) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            config,
            seed,
            started_at: timestamp(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(name, e))?;
        self.write(name, &(text + "\n"))
    }

    /// Register an output written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn finish(self) -> Result<RunManifest> {
        for o in &self.outputs {
            let p = self.out_dir.join(o);
            if !p.exists() {
                return Err(Error::Config(format!("manifest output {} is missing", p.display())));
            }
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: config_hash(&self.config),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: timestamp(),
            config: self.config,
            outputs: self.outputs,
            inputs: self.inputs,
        };
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
