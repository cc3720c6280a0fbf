//! Checkpoint container for [`DenoiserParams`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8     magic "VDNCKPT\0"
//! bytes 8..12    u32 format version (currently 1)
//! bytes 12..16   u32 header length L
//! bytes 16..16+L UTF-8 JSON header
//! remainder      f64 little-endian payload, tensors back to back in the
//!                order listed by header.tensors
//! ```
//!
//! The header records the block kind, mode, W, D, T, window length, channel
//! counts, the space-to-depth channel-order tag, per-layer specs and the
//! normalization kind of each layer (`batch` tensors: gamma, beta,
//! running_mean, running_var; `affine` tensors: scale, shift), followed by a
//! free-form `metadata` object (training configuration, provenance).
//! Tensor values are stored bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{
    BlockConfig, BlockKind, ConvLayer, ConvLayerSpec, DenoiserParams, Mode, NormState,
    CHANNEL_ORDER_TAG,
};

pub const MAGIC: &[u8; 8] = b"VDNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub metadata: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NormKind {
    Batch,
    Affine,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    #[serde(flatten)]
    spec: ConvLayerSpec,
    norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: BlockKind,
    mode: Mode,
    width: usize,
    depth: usize,
    temporal_radius: usize,
    window: usize,
    in_channels: usize,
    out_channels: usize,
    channel_order: String,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: Map<String, Value>,
}

fn tensors_of(params: &DenoiserParams) -> Vec<(String, &[f64])> {
    let mut out: Vec<(String, &[f64])> = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        out.push((format!("layers.{i}.weight"), &layer.weight));
        out.push((format!("layers.{i}.bias"), &layer.bias));
        match &layer.norm {
            Some(NormState::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            }) => {
                out.push((format!("layers.{i}.norm.gamma"), gamma));
                out.push((format!("layers.{i}.norm.beta"), beta));
                out.push((format!("layers.{i}.norm.running_mean"), running_mean));
                out.push((format!("layers.{i}.norm.running_var"), running_var));
            }
            Some(NormState::Affine { scale, shift }) => {
                out.push((format!("layers.{i}.norm.scale"), scale));
                out.push((format!("layers.{i}.norm.shift"), shift));
            }
            None => {}
        }
    }
    out
}

pub fn encode(params: &DenoiserParams, metadata: &Map<String, Value>) -> Result<Vec<u8>> {
    params.validate()?;
    let tensors = tensors_of(params);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: params.config.kind,
        mode: params.mode,
        width: params.config.width,
        depth: params.config.depth,
        temporal_radius: params.config.temporal_radius,
        window: params.config.window_len(),
        in_channels: params.config.in_channels(),
        out_channels: params.config.out_channels(),
        channel_order: CHANNEL_ORDER_TAG.to_string(),
        layers: params
            .layers
            .iter()
            .map(|l| {
                let (norm, eps, momentum) = match &l.norm {
                    Some(NormState::Batch { eps, momentum, .. }) => {
                        (Some(NormKind::Batch), Some(*eps), Some(*momentum))
                    }
                    Some(NormState::Affine { .. }) => (Some(NormKind::Affine), None, None),
                    None => (None, None, None),
                };
                LayerHeader {
                    spec: l.spec,
                    norm,
                    eps,
                    momentum,
                }
            })
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.channel_order != CHANNEL_ORDER_TAG {
        return Err(Error::Format(format!(
            "unknown channel order '{}'",
            header.channel_order
        )));
    }

    let mut payload = &bytes[header_end..];
    let expected: usize = header.tensors.iter().map(|t| t.len * 8).sum();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut tensors = header.tensors.iter();
    let mut take = |name: String| -> Result<Vec<f64>> {
        let entry = tensors
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if entry.name != name {
            return Err(Error::Format(format!("expected tensor {name}, found {}", entry.name)));
        }
        let (head, rest) = payload.split_at(entry.len * 8);
        payload = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.iter().enumerate() {
        let weight = take(format!("layers.{i}.weight"))?;
        let bias = take(format!("layers.{i}.bias"))?;
        let norm = match lh.norm {
            None => None,
            Some(NormKind::Batch) => Some(NormState::Batch {
                gamma: take(format!("layers.{i}.norm.gamma"))?,
                beta: take(format!("layers.{i}.norm.beta"))?,
                running_mean: take(format!("layers.{i}.norm.running_mean"))?,
                running_var: take(format!("layers.{i}.norm.running_var"))?,
                eps: lh.eps.unwrap_or(crate::model::BN_EPS),
                momentum: lh.momentum.unwrap_or(crate::model::BN_MOMENTUM),
            }),
            Some(NormKind::Affine) => Some(NormState::Affine {
                scale: take(format!("layers.{i}.norm.scale"))?,
                shift: take(format!("layers.{i}.norm.shift"))?,
            }),
        };
        layers.push(ConvLayer {
            spec: lh.spec,
            weight,
            bias,
            norm,
        });
    }
    let params = DenoiserParams {
        config: BlockConfig {
            kind: header.kind,
            width: header.width,
            depth: header.depth,
            temporal_radius: header.temporal_radius,
        },
        mode: header.mode,
        layers,
    };
    params.validate()?;
    if header.window != params.config.window_len() || header.in_channels != params.config.in_channels() {
        return Err(Error::Format("header window/channel counts are inconsistent".into()));
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

/// Write atomically (temporary file in the same directory, then rename).
pub fn save_checkpoint(path: &Path, params: &DenoiserParams, metadata: &Map<String, Value>) -> Result<()> {
    let bytes = encode(params, metadata)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
