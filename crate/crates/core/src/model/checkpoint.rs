//! `DSC1` checkpoint format.
//!
//! ```text
//! b"DSC1" | u32 LE header length | header JSON | f32 LE tensor data
//! ```
//!
//! The header holds the [`ModelConfig`] and the name and shape of every
//! tensor; data follows in canonical parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DSC1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        tensors: model
            .param_names()
            .into_iter()
            .zip(&model.params)
            .map(|(name, t)| Entry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.num_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &model.params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        if magic[..3] == MAGIC[..3] {
            return Err(Error::UnsupportedVersion(magic));
        }
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::Truncated(format!(
            "header needs {hlen} bytes, {} present",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    header.config.validate()?;
    let specs = header.config.param_specs();
    if specs.len() != header.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "config implies {} tensors, header lists {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), e) in specs.iter().zip(&header.tensors) {
        if *name != e.name || *shape != e.shape {
            return Err(Error::ConfigMismatch(format!(
                "expected {name} {shape:?}, header has {} {:?}",
                e.name, e.shape
            )));
        }
    }
    let data = &body[hlen..];
    let expected: usize = specs.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
    if data.len() < expected {
        return Err(Error::Truncated(format!(
            "tensor data needs {expected} bytes, {} present",
            data.len()
        )));
    }
    if data.len() > expected {
        return Err(Error::ConfigMismatch(format!(
            "{} trailing bytes after tensor data",
            data.len() - expected
        )));
    }
    let mut cursor = 0;
    let mut params = Vec::with_capacity(specs.len());
    for (_, shape) in specs {
        let n: usize = shape.iter().product();
        let vals = data[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        cursor += 4 * n;
        params.push(Tensor::new(shape, vals)?);
    }
    Model::from_params(header.config, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

/// Loads and checks the stored config against `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config != *expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}
