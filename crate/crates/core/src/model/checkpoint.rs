//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header (format version, config, tensor name/shape/offset table), then
//! raw little-endian f32 arrays in header order. Offsets count floats from
//! the start of the data section. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::lora::{LoraAdapters, LoraPair};
use super::{LmConfig, ModelError, ModelState, ParamSet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: LmConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
}

/// Writes any named tensor collection in the container layout. Shared by
/// model checkpoints and the retrieval index.
pub fn write_container(
    header_extra: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Vec<u8> {
    let mut offset = 0usize;
    let entries: Vec<serde_json::Value> = tensors
        .iter()
        .map(|(name, t)| {
            let e = serde_json::json!({
                "name": name,
                "shape": t.shape,
                "offset": offset,
            });
            offset += t.numel();
            e
        })
        .collect();
    let mut header = header_extra;
    header["format_version"] = serde_json::json!(FORMAT_VERSION);
    header["tensors"] = serde_json::Value::Array(entries);
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset * 4);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>), ModelError> {
    if bytes.len() < 8 {
        return Err(ModelError::Header("file shorter than length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(ModelError::Header("header truncated".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| ModelError::Header(e.to_string()))?;
    let data = &bytes[header_end..];
    let entries = header["tensors"]
        .as_array()
        .ok_or_else(|| ModelError::Header("missing tensor table".into()))?
        .clone();
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let name = e["name"]
            .as_str()
            .ok_or_else(|| ModelError::Header("tensor entry missing name".into()))?
            .to_string();
        let shape: Vec<usize> = serde_json::from_value(e["shape"].clone())
            .map_err(|err| ModelError::Header(err.to_string()))?;
        let offset = e["offset"]
            .as_u64()
            .ok_or_else(|| ModelError::Header("tensor entry missing offset".into()))?
            as usize;
        let numel: usize = shape.iter().product();
        let start = offset * 4;
        let end = start + numel * 4;
        if end > data.len() {
            return Err(ModelError::Header(format!("tensor {name} overruns data")));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor { shape, data: values }));
    }
    Ok((header, tensors))
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>, ModelError> {
    let mut tensors: Vec<(String, &Tensor)> = state
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    let lora_meta = state.lora.as_ref().map(|adapters| LoraMeta {
        rank: adapters.rank,
        alpha: adapters.alpha,
        targets: adapters.targets.keys().cloned().collect(),
    });
    if let Some(adapters) = &state.lora {
        for (target, pair) in &adapters.targets {
            tensors.push((format!("lora.{target}.a"), &pair.a));
            tensors.push((format!("lora.{target}.b"), &pair.b));
        }
    }
    let mut extra = serde_json::json!({
        "config": state.config,
        "step": state.step,
    });
    if let Some(meta) = lora_meta {
        extra["lora"] = serde_json::to_value(meta).expect("lora meta");
    }
    Ok(write_container(extra, &tensors))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState, ModelError> {
    let (header, tensors) = read_container(bytes)?;
    let config: LmConfig = serde_json::from_value(header["config"].clone())
        .map_err(|e| ModelError::Header(e.to_string()))?;
    let step = header["step"].as_u64().unwrap_or(0);
    let lora_meta: Option<LoraMeta> = match header.get("lora") {
        Some(v) if !v.is_null() => {
            Some(serde_json::from_value(v.clone()).map_err(|e| ModelError::Header(e.to_string()))?)
        }
        _ => None,
    };
    let mut params = ParamSet::default();
    let mut lora_tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("lora.") {
            lora_tensors.insert(rest.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }
    let lora = match lora_meta {
        Some(meta) => {
            let mut targets = BTreeMap::new();
            for t in &meta.targets {
                let a = lora_tensors
                    .remove(&format!("{t}.a"))
                    .ok_or_else(|| ModelError::Header(format!("missing lora tensor {t}.a")))?;
                let b = lora_tensors
                    .remove(&format!("{t}.b"))
                    .ok_or_else(|| ModelError::Header(format!("missing lora tensor {t}.b")))?;
                targets.insert(t.clone(), LoraPair { a, b });
            }
            Some(LoraAdapters {
                rank: meta.rank,
                alpha: meta.alpha,
                targets,
            })
        }
        None => None,
    };
    Ok(ModelState {
        config,
        params,
        lora,
        step,
    })
}

pub fn save(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = to_bytes(state)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState, ModelError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lora, TrainScope};
    use crate::tensor::Tape;

    fn tiny_model() -> ModelState {
        ModelState::init(LmConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            context_len: 32,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        let model = tiny_model();
        let bytes = to_bytes(&model).unwrap();
        let restored = from_bytes(&bytes).unwrap();
        let tokens: Vec<u32> = vec![256, 1, 2, 3, 4];
        let mut t1 = Tape::new();
        let l1 = model.forward(&mut t1, &tokens, TrainScope::Frozen).unwrap();
        let mut t2 = Tape::new();
        let l2 = restored
            .forward(&mut t2, &tokens, TrainScope::Frozen)
            .unwrap();
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1.data(l1)), bits(t2.data(l2)));
    }

    #[test]
    fn round_trip_preserves_adapters() {
        let mut model = tiny_model();
        lora::attach(&mut model, &lora::LoraSpec::default(), 13);
        let bytes = to_bytes(&model).unwrap();
        let restored = from_bytes(&bytes).unwrap();
        let (orig, rest) = (model.lora.unwrap(), restored.lora.unwrap());
        assert_eq!(orig.rank, rest.rank);
        assert_eq!(orig.alpha, rest.alpha);
        for (name, pair) in &orig.targets {
            let r = &rest.targets[name];
            assert_eq!(pair.a.data, r.a.data);
            assert_eq!(pair.b.data, r.b.data);
        }
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.bin");
        let model = tiny_model();
        save(&model, &path).unwrap();
        let restored = load(&path).unwrap();
        assert_eq!(model.content_hash(), restored.content_hash());
    }

    #[test]
    fn serialization_is_deterministic() {
        let model = tiny_model();
        assert_eq!(to_bytes(&model).unwrap(), to_bytes(&model).unwrap());
    }
}
