//! Model checkpoints: a tar archive holding `config.json`, `meta.json`,
//! one little-endian float32 blob per parameter under `params/`, and optional
//! auxiliary arrays (optimizer moments) under `extra/`.
//!
//! Archive headers carry fixed timestamps and ownership so identical
//! contents produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Value,
    /// Parameter name and values, in architecture order.
    pub params: Vec<(String, Vec<f32>)>,
    pub extra: BTreeMap<String, Vec<f32>>,
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(values, &mut out);
    out
}

fn from_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
    }
    let mut out = vec![0f32; bytes.len() / 4];
    LittleEndian::read_f32_into(bytes, &mut out);
    Ok(out)
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: Value) -> Self {
        Checkpoint {
            config: *model.config(),
            meta,
            params: model
                .param_names()
                .zip(model.params())
                .map(|(n, t)| (n.to_string(), t.data().to_vec()))
                .collect(),
            extra: BTreeMap::new(),
        }
    }

    /// Rebuilds the model; fails unless every parameter matches the
    /// architecture described by the stored config.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model: Model<f32> = build_model(&self.config, 0)?;
        let specs = model.param_specs().to_vec();
        if specs.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter arrays, archive has {}",
                specs.len(),
                self.params.len()
            )));
        }
        let stored: BTreeMap<&str, &Vec<f32>> = self.params.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let values = stored
                .get(spec.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            let t = Tensor::from_vec(spec.shape, (*values).clone()).map_err(|_| {
                Error::Checkpoint(format!(
                    "parameter {} has {} values, expected shape {:?}",
                    spec.name,
                    values.len(),
                    spec.shape
                ))
            })?;
            tensors.push(t);
        }
        model.set_params(tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut tar = tar::Builder::new(BufWriter::new(file));
        let mut add = |name: &str, data: &[u8]| -> std::io::Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            header.set_cksum();
            tar.append_data(&mut header, name, data)
        };
        let io = |e| Error::io(path, e);
        add("config.json", serde_json::to_string_pretty(&self.config)?.as_bytes()).map_err(io)?;
        add("meta.json", serde_json::to_string_pretty(&self.meta)?.as_bytes()).map_err(io)?;
        let order: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        add("params/order.json", serde_json::to_string(&order)?.as_bytes()).map_err(io)?;
        for (name, values) in &self.params {
            add(&format!("params/{name}.f32"), &to_bytes(values)).map_err(io)?;
        }
        for (name, values) in &self.extra {
            add(&format!("extra/{name}.f32"), &to_bytes(values)).map_err(io)?;
        }
        let mut w = tar.into_inner().map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = tar::Archive::new(BufReader::new(file));
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let bad = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        for entry in archive.entries().map_err(bad)? {
            let mut entry = entry.map_err(bad)?;
            let name = entry.path().map_err(bad)?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(bad)?;
            blobs.insert(name, data);
        }
        let take = |blobs: &mut BTreeMap<String, Vec<u8>>, name: &str| {
            blobs
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("archive has no {name}")))
        };
        let config: ModelConfig = serde_json::from_slice(&take(&mut blobs, "config.json")?)?;
        let meta: Value = serde_json::from_slice(&take(&mut blobs, "meta.json")?)?;
        let order: Vec<String> = serde_json::from_slice(&take(&mut blobs, "params/order.json")?)?;
        let mut params = Vec::with_capacity(order.len());
        for name in order {
            let values = from_bytes(&take(&mut blobs, &format!("params/{name}.f32"))?)?;
            params.push((name, values));
        }
        let mut extra = BTreeMap::new();
        for (name, bytes) in blobs {
            if let Some(key) = name.strip_prefix("extra/").and_then(|n| n.strip_suffix(".f32")) {
                extra.insert(key.to_string(), from_bytes(&bytes)?);
            } else {
                return Err(Error::Checkpoint(format!("unexpected archive entry {name}")));
            }
        }
        Ok(Checkpoint {
            config,
            meta,
            params,
            extra,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, Injection};

    fn small() -> ModelConfig {
        ModelConfig {
            base_features: 2,
            depth: 2,
            ..ModelConfig::desk(Arch::Unet, Injection::Dualbranch, 2)
        }
    }

    #[test]
    fn round_trip_is_exact_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let model: Model<f32> = build_model(&small(), 11).unwrap();
        let mut ck = Checkpoint::from_model(&model, serde_json::json!({"epoch": 3}));
        ck.extra.insert("adam.m.0".into(), vec![0.5, -1.0]);
        let a = dir.path().join("a.tar");
        let b = dir.path().join("b.tar");
        ck.save(&a).unwrap();
        ck.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params(), model.params());
    }

    #[test]
    fn rejects_config_parameter_mismatch() {
        let model: Model<f32> = build_model(&small(), 1).unwrap();
        let mut ck = Checkpoint::from_model(&model, Value::Null);
        ck.config.base_features = 3;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));

        let mut ck = Checkpoint::from_model(&model, Value::Null);
        ck.params[0].1.pop();
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));

        let mut ck = Checkpoint::from_model(&model, Value::Null);
        ck.params[1].0 = "renamed.bias".into();
        assert!(ck.to_model().is_err());
    }
}
