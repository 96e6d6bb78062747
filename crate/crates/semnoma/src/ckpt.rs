//! Single-file checkpoint container: a safetensors tensor payload with a
//! JSON-in-metadata header carrying a schema version, the checkpoint kind,
//! the architecture or schedule it belongs to, and training provenance
//! (seed, epoch, loss history).

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::model::CodecConfig;
use candle_core::{Device, Tensor};
use std::collections::HashMap;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkptKind {
    Codec,
    Denoiser,
}

/// Training provenance embedded in every checkpoint.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub loss_history: Vec<f64>,
    pub val_psnr_history: Vec<f64>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: CkptKind,
    pub codec_config: Option<CodecConfig>,
    pub schedule: Option<ScheduleSpec>,
    pub train: TrainMeta,
    pub tensors: HashMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: CkptKind,
    codec_config: Option<&CodecConfig>,
    schedule: Option<&ScheduleSpec>,
    train: &TrainMeta,
    tensors: &HashMap<String, Tensor>,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
    meta.insert(
        "kind".to_string(),
        serde_json::to_string(&kind).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    if let Some(cfg) = codec_config {
        meta.insert(
            "codec_config".to_string(),
            serde_json::to_string(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    if let Some(s) = schedule {
        meta.insert(
            "schedule".to_string(),
            serde_json::to_string(s).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    meta.insert(
        "train".to_string(),
        serde_json::to_string(train).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );

    // materialize tensor payloads as little-endian f32 bytes
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();
    let mut payloads: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(names.len());
    for name in names {
        let t = &tensors[name];
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        payloads.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views: Vec<(String, safetensors::tensor::TensorView)> = payloads
        .iter()
        .map(|(n, dims, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, dims.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{e:?}")))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(views, &Some(meta), path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.as_ref().display())))
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let (_n, header) = safetensors::tensor::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata header", path.display())))?;
    let version: u32 = meta
        .get("schema_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing schema_version".to_string()))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {version} (expected {SCHEMA_VERSION})"
        )));
    }
    let kind: CkptKind = meta
        .get("kind")
        .and_then(|v| serde_json::from_str(v).ok())
        .ok_or_else(|| Error::Checkpoint("missing checkpoint kind".to_string()))?;
    let codec_config = match meta.get("codec_config") {
        Some(v) => {
            Some(serde_json::from_str(v).map_err(|e| Error::Checkpoint(e.to_string()))?)
        }
        None => None,
    };
    let schedule = match meta.get("schedule") {
        Some(v) => {
            Some(serde_json::from_str(v).map_err(|e| Error::Checkpoint(e.to_string()))?)
        }
        None => None,
    };
    let train: TrainMeta = meta
        .get("train")
        .and_then(|v| serde_json::from_str(v).ok())
        .unwrap_or_default();
    let tensors = candle_core::safetensors::load(path, device)?;
    Ok(Checkpoint { kind, codec_config, schedule, train, tensors })
}

/// Snapshot a var map as detached tensor copies keyed by name.
pub fn snapshot_varmap(map: &candle_nn::VarMap) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for (name, var) in map.data().lock().unwrap().iter() {
        out.insert(name.clone(), var.as_tensor().copy()?);
    }
    Ok(out)
}
