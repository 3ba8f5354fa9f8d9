//! JSON checkpoint. Each parameter stores its name, shape and row-major
//! values, every value as the 16 hex digits of its IEEE-754 bit pattern so a
//! save/load round trip is bit-exact (NaN payloads and signed zeros included).

use std::path::Path;

use crlnet_core::tensor_autodiff::ParamSet;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub metadata: Metadata,
    pub params: Vec<ParamEntry>,
}

pub fn encode_value(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode_value(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, metadata: Metadata) -> Self {
        let params = params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| encode_value(v)).collect(),
            })
            .collect();
        Self { format_version: FORMAT_VERSION, metadata, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).expect("checkpoint serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |message: String| CliError::Checkpoint { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(fail(format!("format version {} (expected {FORMAT_VERSION})", ck.format_version)));
        }
        for p in &ck.params {
            if p.shape.iter().product::<usize>() != p.values.len() {
                return Err(fail(format!("{} has shape {:?} but {} values", p.name, p.shape, p.values.len())));
            }
        }
        Ok(ck)
    }

    /// Copies the stored values into a clone of `template`. Names and shapes
    /// must match the template exactly and in order.
    pub fn restore(&self, template: &ParamSet) -> Result<ParamSet> {
        let mismatch = |m: String| CliError::Config(format!("checkpoint does not match the configured model: {m}"));
        if self.params.len() != template.len() {
            return Err(mismatch(format!("{} parameters, model has {}", self.params.len(), template.len())));
        }
        let mut out = template.clone();
        for (i, entry) in self.params.iter().enumerate() {
            let (name, t) = (template.name(i), template.tensor(i));
            if entry.name != name || entry.shape != t.shape() {
                return Err(mismatch(format!("{} {:?} vs {name} {:?}", entry.name, entry.shape, t.shape())));
            }
            let dst = out.tensor_mut(i).data_mut();
            for (d, s) in dst.iter_mut().zip(&entry.values) {
                *d = decode_value(s).ok_or_else(|| mismatch(format!("{}: bad value {s:?}", entry.name)))?;
            }
        }
        Ok(out)
    }
}
