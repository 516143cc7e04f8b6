//! Effective run configuration: defaults, then a JSON file of flat dotted
//! keys, then command-line flags. The merged result is what gets
//! snapshotted, so `--config <snapshot>` replays a run exactly.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use snowkit::train::TrainConfig;
use snowkit_tensor::OptimizerConfig;

use crate::Usage;

/// Name of the snapshot written into every output directory.
pub const SNAPSHOT_FILE: &str = "run_config.json";

/// Environment variable giving the default worker count.
pub const THREADS_ENV: &str = "SNOWKIT_THREADS";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig<T> {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    #[serde(flatten)]
    pub command: T,
}

/// Keys whose value is copied from a top-level key after merging, so the
/// global flag is the single source of truth.
pub trait Mirrored {
    const MIRRORED: &'static [(&'static str, &'static str)] = &[];
}

/// Nested objects become `a.b.c` keys; everything else is a leaf.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

fn remove(root: &mut Value, key: &str) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = root;
    for p in parts {
        match node.get_mut(p) {
            Some(n) => node = n,
            None => return,
        }
    }
    if let Value::Object(m) = node {
        m.remove(last);
    }
}

/// Sets a dotted key that must already exist in `root`.
fn set(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, p) in parts.iter().enumerate() {
        let Value::Object(m) = node else {
            return Err(format!("unknown setting `{key}`"));
        };
        if !m.contains_key(*p) {
            return Err(format!("unknown setting `{key}`"));
        }
        if i + 1 == parts.len() {
            m.insert(p.to_string(), value);
            return Ok(());
        }
        node = m.get_mut(*p).expect("checked above");
    }
    unreachable!("keys are non-empty")
}

/// Switching optimizer resets its hyper-parameters to that optimizer's
/// defaults before any of them are overridden.
fn set_optimizer_name(root: &mut Value, key: &str, value: &Value) -> Result<(), String> {
    let name = value.as_str().ok_or_else(|| format!("`{key}` must be a string"))?;
    let cfg = OptimizerConfig::from_name(name)
        .ok_or_else(|| format!("unknown optimizer `{name}` (expected one of {})", OptimizerConfig::NAMES.join(", ")))?;
    let parent = &key[..key.len() - ".name".len()];
    set(root, parent, serde_json::to_value(cfg).expect("optimizer serializes"))
}

/// Parses a `key=value` override; the value is JSON when it parses as JSON
/// and a plain string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Reads a config file. Nested objects are accepted and flattened.
pub fn read_file(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Usage(format!("config {} must be a JSON object", path.display())).into());
    }
    Ok(flatten(&value))
}

/// Applies `layers` in order on top of `defaults`. Unknown keys and type
/// errors are collected and reported together.
pub fn resolve<T>(defaults: RunConfig<T>, layers: &[Map<String, Value>]) -> Result<RunConfig<T>, Usage>
where
    T: Serialize + DeserializeOwned + Mirrored,
{
    let mut root = serde_json::to_value(&defaults).expect("config serializes");
    for (inner, _) in T::MIRRORED {
        remove(&mut root, inner);
    }
    let mut problems = Vec::new();
    for layer in layers {
        // optimizer switches first so their fields can follow in the same layer
        let (names, rest): (Vec<_>, Vec<_>) = layer.iter().partition(|(k, _)| k.ends_with("optimizer.name"));
        for (k, v) in names {
            if let Err(e) = set_optimizer_name(&mut root, k, v) {
                problems.push(e);
            }
        }
        for (k, v) in rest {
            if T::MIRRORED.iter().any(|(inner, _)| inner == k) {
                problems.push(format!("`{k}` is set through the global setting instead"));
            } else if let Err(e) = set(&mut root, k, v.clone()) {
                problems.push(e);
            }
        }
    }
    for (inner, outer) in T::MIRRORED {
        let v = root.get(*outer).cloned().unwrap_or(Value::Null);
        if let Err(e) = set_mirror(&mut root, inner, v) {
            problems.push(e);
        }
    }
    if !problems.is_empty() {
        return Err(Usage(problems.join("\n")));
    }
    serde_json::from_value(root).map_err(|e| Usage(format!("invalid configuration: {e}")))
}

fn set_mirror(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let (parent, last) = key.rsplit_once('.').expect("mirrored keys are nested");
    let mut node = root;
    for p in parent.split('.') {
        node = node.get_mut(p).ok_or_else(|| format!("missing section for `{key}`"))?;
    }
    node.as_object_mut().ok_or_else(|| format!("`{parent}` is not a section"))?.insert(last.to_string(), value);
    Ok(())
}

/// Writes the effective config as flat dotted keys.
pub fn write_snapshot<T: Serialize + Mirrored>(cfg: &RunConfig<T>, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut value = serde_json::to_value(cfg)?;
    for (inner, _) in T::MIRRORED {
        remove(&mut value, inner);
    }
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&Value::Object(flatten(&value)))? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

impl Mirrored for TrainConfig {}
