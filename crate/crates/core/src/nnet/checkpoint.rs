// SPDX-License-Identifier: Apache-2.0

//! Parameter checkpoint files.
//!
//! UTF-8 JSON:
//!
//! ```text
//! {
//!   "format": "bevpretrain-checkpoint",
//!   "version": 1,
//!   "meta": { "<key>": "<value>", ... },
//!   "tensors": {
//!     "<group>/<name>": { "shape": [rows, cols], "values": [row-major f64 ...] },
//!     ...
//!   }
//! }
//! ```
//!
//! Keys are sorted, and floats are written in shortest round-trip form, so
//! identical parameters always produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT: &str = "bevpretrain-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub groups: BTreeMap<String, ParamSet>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FileRecord {
    format: String,
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_group(mut self, name: &str, params: &ParamSet) -> Self {
        self.groups.insert(name.to_string(), params.clone());
        self
    }

    pub fn group(&self, name: &str) -> Option<&ParamSet> {
        self.groups.get(name)
    }

    pub fn to_json(&self) -> String {
        let mut tensors = BTreeMap::new();
        for (g, set) in &self.groups {
            for (n, t) in set.iter() {
                tensors.insert(
                    format!("{g}/{n}"),
                    TensorRecord {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                );
            }
        }
        let rec = FileRecord {
            format: FORMAT.to_string(),
            version: VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        serde_json::to_string(&rec).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let rec: FileRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if rec.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", rec.format)));
        }
        if rec.version != VERSION {
            return Err(bad(format!("unsupported version {}", rec.version)));
        }
        let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
        for (key, t) in rec.tensors {
            let (g, n) = key
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor name {key:?} lacks a group")))?;
            if t.shape[0] * t.shape[1] != t.values.len() {
                return Err(bad(format!(
                    "tensor {key}: shape {:?} does not match {} values",
                    t.shape,
                    t.values.len()
                )));
            }
            groups
                .entry(g.to_string())
                .or_default()
                .insert(n, Tensor::new(t.shape[0], t.shape[1], t.values));
        }
        Ok(Self { meta: rec.meta, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }
}
