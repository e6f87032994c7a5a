// SPDX-License-Identifier: Apache-2.0

//! Flat `key = value` run configuration.
//!
//! Library settings use `section.field` keys, one section per library
//! config (`scene`, `pooling`, `arch`, `contrast`, `rad`, `train`,
//! `probe`). Run-level keys (`seed`, paths, counts) have no prefix. Text
//! after `#` is a comment. Values are numbers, `true`/`false`, bare words
//! for enum variants and paths, and `a, b` (or `[a, b]`) for ranges. An
//! empty value clears an optional path.
//!
//! Later sources win: config file, then `--set`, then dedicated flags.
//! `train.stage` and `train.seed` are fixed by the subcommand and `seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bevpretrain::contrast::ContrastConfig;
use bevpretrain::distill::RadConfig;
use bevpretrain::pipeline::{ArchConfig, ProbeConfig, TrainConfig};
use bevpretrain::pooling::PoolingConfig;
use bevpretrain::scenegen::SceneSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

const RESERVED: [(&str, &str); 2] = [
    ("train.stage", "set by the subcommand"),
    ("train.seed", "use `seed`"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data generation, pooling, initialization and batching.
    pub seed: u64,
    /// Scenes generated by `gen-data`, or in memory when no data dir is given.
    pub n_scenes: usize,
    /// Held-out scenes generated for `probe` when no data dir is given.
    pub probe_scenes: usize,
    pub gradcheck_seeds: usize,
    pub gradcheck_tolerance: f64,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub scene: SceneSpec,
    pub pooling: PoolingConfig,
    pub arch: ArchConfig,
    pub contrast: ContrastConfig,
    pub rad: RadConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 20,
            probe_scenes: 40,
            gradcheck_seeds: 5,
            gradcheck_tolerance: 1e-4,
            data_dir: None,
            checkpoint_in: None,
            checkpoint_out: None,
            metrics_out: None,
            scene: SceneSpec::default(),
            pooling: PoolingConfig::default(),
            arch: ArchConfig::default(),
            contrast: ContrastConfig::default(),
            rad: RadConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl Entry {
    pub fn new(key: &str, value: impl Into<String>, origin: &str) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
            origin: origin.into(),
        }
    }
}

pub fn parse_file(path: &Path) -> Result<Vec<Entry>, Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{}:{}", path.display(), i + 1);
        match line.split_once('=') {
            Some((k, v)) => entries.push(Entry::new(k.trim(), v.trim(), &origin)),
            None => errors.push(format!("{origin}: expected `key = value`, got {line:?}")),
        }
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(errors)
    }
}

/// `KEY=VALUE` from the command line.
pub fn parse_set(arg: &str) -> Result<Entry, String> {
    match arg.split_once('=') {
        Some((k, v)) => Ok(Entry::new(k.trim(), v.trim(), "--set")),
        None => Err(format!("--set {arg:?}: expected KEY=VALUE")),
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn leaf_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(root, |v, part| v.as_object_mut()?.get_mut(part))
}

/// Typed value for `raw`, shaped after the default at the same key.
fn typed(default: &Value, raw: &str) -> Result<Value, String> {
    let unquoted = raw.trim_matches('"');
    match default {
        Value::Null | Value::String(_) if unquoted.is_empty() && default.is_null() => Ok(Value::Null),
        Value::Null | Value::String(_) => Ok(Value::String(unquoted.to_string())),
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got {raw:?}")),
        },
        Value::Number(_) => match serde_json::from_str::<Value>(raw) {
            Ok(v @ Value::Number(_)) => Ok(v),
            _ => Err(format!("expected a number, got {raw:?}")),
        },
        Value::Array(_) => {
            let text = if raw.starts_with('[') { raw.to_string() } else { format!("[{raw}]") };
            match serde_json::from_str::<Value>(&text) {
                Ok(v @ Value::Array(_)) => Ok(v),
                _ => Err(format!("expected a list like `1, 2`, got {raw:?}")),
            }
        }
        Value::Object(_) => Err("not a leaf key".into()),
    }
}

fn section_errors(cfg: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    let checks = [
        ("scene", cfg.scene.validate()),
        ("pooling", cfg.pooling.validate()),
        ("arch", cfg.arch.validate()),
        ("contrast", cfg.contrast.validate()),
        ("rad", cfg.rad.validate()),
        ("train", cfg.train.validate()),
        ("probe", cfg.probe.validate()),
    ];
    for (section, r) in checks {
        if let Err(e) = r {
            out.push(match e {
                bevpretrain::Error::Config { field, reason } => format!("{section}.{field}: {reason}"),
                other => format!("{section}: {other}"),
            });
        }
    }
    if cfg.n_scenes < 1 {
        out.push("n_scenes: must be >= 1".into());
    }
    if cfg.probe_scenes < 2 {
        out.push("probe_scenes: must be >= 2".into());
    }
    if cfg.gradcheck_seeds < 1 {
        out.push("gradcheck_seeds: must be >= 1".into());
    }
    if !(cfg.gradcheck_tolerance > 0.0) {
        out.push("gradcheck_tolerance: must be > 0".into());
    }
    out
}

fn from_value(v: Value) -> Result<RunConfig, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// Applies `entries` over the defaults. Every bad key is reported, each once.
pub fn resolve(entries: &[Entry]) -> Result<RunConfig, Vec<String>> {
    let base = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut merged = base.clone();
    let mut errors = Vec::new();
    let baseline = section_errors(&RunConfig::default());
    for e in entries {
        if let Some((_, why)) = RESERVED.iter().find(|(k, _)| *k == e.key) {
            errors.push(format!("{}: {}: {}", e.origin, e.key, why));
            continue;
        }
        let Some(default) = leaf_mut(&mut base.clone(), &e.key).map(|v| v.clone()) else {
            errors.push(format!("{}: unknown key {:?}", e.origin, e.key));
            continue;
        };
        if default.is_object() {
            errors.push(format!("{}: unknown key {:?}", e.origin, e.key));
            continue;
        }
        let value = match typed(&default, &e.value) {
            Ok(v) => v,
            Err(why) => {
                errors.push(format!("{}: {}: {why}", e.origin, e.key));
                continue;
            }
        };
        let mut alone = base.clone();
        *leaf_mut(&mut alone, &e.key).expect("known key") = value.clone();
        match from_value(alone) {
            Ok(cfg) => {
                for msg in section_errors(&cfg) {
                    if !baseline.contains(&msg) {
                        errors.push(format!("{}: {msg}", e.origin));
                    }
                }
            }
            Err(why) => errors.push(format!("{}: {}: {why}", e.origin, e.key)),
        }
        *leaf_mut(&mut merged, &e.key).expect("known key") = value;
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let cfg = from_value(merged).map_err(|e| vec![e])?;
    let combined = section_errors(&cfg);
    if combined.is_empty() {
        Ok(cfg)
    } else {
        Err(combined)
    }
}

/// Every settable key with its resolved value, in a form [`parse_file`] reads back.
pub fn render(cfg: &RunConfig) -> String {
    let mut leaves = Vec::new();
    flatten(&serde_json::to_value(cfg).expect("config serializes"), "", &mut leaves);
    let mut out = String::from("# resolved configuration\n");
    for (k, v) in leaves {
        if RESERVED.iter().any(|(r, _)| *r == k) {
            continue;
        }
        let text = match v {
            Value::Null => String::new(),
            Value::String(s) => s,
            Value::Array(items) => items.iter().map(Value::to_string).collect::<Vec<_>>().join(", "),
            other => other.to_string(),
        };
        writeln!(out, "{k} = {text}").unwrap();
    }
    out
}
