use std::path::{Path, PathBuf};

use bridging::evaluation::EvalSetting;
use bridging::{ModelConfig, Task, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::Failure;

/// Everything one command needs; serialized into every artifact it writes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub corpus: Option<PathBuf>,
    pub static_vectors: Option<PathBuf>,
    pub contextual_vectors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub setting: EvalSetting,
    /// Task whose links `predict` writes.
    pub task: Task,
    /// Let ε win in antecedent selection.
    pub include_epsilon: bool,
    pub folds: usize,
    pub parallel_folds: bool,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            corpus: None,
            static_vectors: None,
            contextual_vectors: None,
            checkpoint: None,
            output: None,
            setting: EvalSetting::Keep,
            task: Task::Bridging,
            include_epsilon: false,
            folds: 10,
            parallel_folds: false,
            checkpoint_every: 0,
        }
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!("config line {}: expected `key = value`", n + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_flat(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    parse_flat(&text).map_err(|f| Failure::usage(format!("{}: {}", path.display(), f.message)))
}

fn leaves(value: &Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Full dotted path for `key`: either the path itself or a unique suffix of
/// one (`lstm_hidden` for `model.encoder.lstm_hidden`).
fn resolve(root: &Value, key: &str) -> Result<String, Failure> {
    let mut all = Vec::new();
    leaves(root, "", &mut all);
    if all.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let matches: Vec<&String> = all.iter().filter(|p| p.ends_with(&suffix)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Failure::usage(format!("unknown configuration key `{key}`"))),
        many => Err(Failure::usage(format!(
            "ambiguous configuration key `{key}` (one of {})",
            many.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn slot<'v>(root: &'v mut Value, path: &str) -> &'v mut Value {
    path.split('.').fold(root, |v, part| &mut v[part])
}

fn parse_value(path: &str, current: &Value, raw: &str) -> Result<Value, Failure> {
    let bad = |what: &str| Failure::usage(format!("`{path}` expects {what}, got `{raw}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(match raw.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => true,
            "false" | "no" | "0" => false,
            _ => return Err(bad("a boolean")),
        }),
        Value::Number(n) if n.is_f64() => {
            Value::from(raw.parse::<f64>().map_err(|_| bad("a number"))?)
        }
        Value::Number(_) => Value::from(
            raw.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?,
        ),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map(Value::from)
                        .map_err(|_| bad("comma-separated integers"))
                })
                .collect::<Result<_, _>>()?,
        ),
        Value::Null if raw.is_empty() => Value::Null,
        _ if path.ends_with(".sharing") => Value::String(raw.to_ascii_uppercase()),
        Value::String(_) => Value::String(raw.to_ascii_lowercase()),
        _ => Value::String(raw.to_string()),
    })
}

impl RunConfig {
    /// Applies `key = value` overrides in order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), Failure> {
        let mut root = serde_json::to_value(&*self).expect("configuration serializes");
        for (key, raw) in pairs {
            let path = resolve(&root, key)?;
            let target = slot(&mut root, &path);
            *target = parse_value(&path, target, raw)?;
        }
        *self = serde_json::from_value(root)
            .map_err(|e| Failure::usage(format!("invalid configuration: {e}")))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// The `{config, seed}` header embedded in every artifact.
    pub fn header(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert(
            "config".into(),
            serde_json::to_value(self).expect("configuration serializes"),
        );
        m.insert("seed".into(), Value::from(self.seed()));
        m
    }
}
