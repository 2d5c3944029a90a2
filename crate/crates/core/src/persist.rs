//! Named-tensor files with JSON manifests.
//!
//! A saved object is a pair `stem.tdw` (the `TDW1` container) and
//! `stem.json` (a manifest naming the weights file and holding configs).
//! Both are written atomically, weights first.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{VaeConfig, VaeParams};
use crate::error::{Error, Result};
use crate::image_io::{read_file, write_atomic};
use crate::numerics::container::{decode, encode, StoredTensor};
use crate::numerics::{ParamSet, Tensor};

/// `stem.json` and `stem.tdw`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    (stem.with_file_name(format!("{name}.json")), stem.with_file_name(format!("{name}.tdw")))
}

/// Appends every parameter as `prefix + name`.
pub fn push_params(out: &mut Vec<(String, StoredTensor)>, prefix: &str, params: &ParamSet) {
    for (name, t) in params.iter() {
        out.push((format!("{prefix}{name}"), StoredTensor::F32(t.clone())));
    }
}

pub fn write_weights(path: &Path, entries: &[(String, StoredTensor)]) -> Result<u64> {
    let bytes = encode(entries);
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_weights(path: &Path, expected_len: Option<u64>) -> Result<HashMap<String, Tensor<f32>>> {
    let bytes = read_file(path)?;
    if let Some(n) = expected_len {
        if bytes.len() as u64 != n {
            return Err(Error::Corrupt {
                kind: "TDW1",
                reason: format!("{} is {} bytes, manifest says {n}", path.display(), bytes.len()),
            });
        }
    }
    Ok(decode(&bytes)?.into_iter().map(|(n, t)| (n, t.into_f32())).collect())
}

/// Replaces every tensor of `template` with `prefix + name` from `weights`,
/// checking shapes.
pub fn fill_params(template: &ParamSet, prefix: &str, weights: &mut HashMap<String, Tensor<f32>>) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let key = format!("{prefix}{name}");
        let v = weights.remove(&key).ok_or_else(|| Error::Corrupt {
            kind: "TDW1",
            reason: format!("missing tensor {key}"),
        })?;
        if v.shape() != t.shape() {
            return Err(Error::Corrupt {
                kind: "TDW1",
                reason: format!("tensor {key} has shape {:?}, expected {:?}", v.shape(), t.shape()),
            });
        }
        out.insert(name, v);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeManifest {
    weights: String,
    weights_bytes: u64,
    config: VaeConfig,
    scale: f32,
}

impl VaeParams {
    /// Writes `stem.tdw` and `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, tdw) = paths(stem);
        let mut entries = Vec::new();
        push_params(&mut entries, "vae.", &self.params);
        let weights_bytes = write_weights(&tdw, &entries)?;
        write_json(
            &json,
            &VaeManifest {
                weights: tdw.file_name().unwrap().to_string_lossy().into_owned(),
                weights_bytes,
                config: self.config.clone(),
                scale: self.scale,
            },
        )
    }

    /// Loads from the manifest written by [`save`](Self::save).
    pub fn load(stem: &Path) -> Result<Self> {
        let (json, _) = paths(stem);
        let m: VaeManifest = read_json(&json)?;
        let mut w = read_weights(&json.with_file_name(&m.weights), Some(m.weights_bytes))?;
        let template = VaeParams::init(m.config.clone(), 0);
        Ok(Self {
            params: fill_params(&template.params, "vae.", &mut w)?,
            config: m.config,
            scale: m.scale,
        })
    }
}
