//! Checkpoints: a TOML header describing the architecture and conditioning
//! layout, and a binary payload of little-endian `f32` parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Architecture, DenoiserModel};
use super::TrainedDenoiser;
use crate::error::{Error, Result};
use crate::grid::Stat;

pub const PARAM_MAGIC: [u8; 8] = *b"CCFGPARM";
const FORMAT_NAME: &str = "ccfg-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Payload file name, relative to the header.
    pub payload: String,
    pub param_count: usize,
    pub inputs: Vec<String>,
    pub groups: Vec<String>,
    pub channel_groups: Vec<usize>,
    pub architecture: Architecture,
    pub speed: Stat,
}

impl CheckpointHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let h: CheckpointHeader = toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if h.format != FORMAT_NAME || h.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", h.format, h.version)));
        }
        h.architecture.validate()?;
        if h.param_count != h.architecture.param_count() {
            return Err(Error::Checkpoint(format!(
                "param_count {} does not match the architecture ({})",
                h.param_count,
                h.architecture.param_count()
            )));
        }
        Ok(h)
    }
}

fn payload_error(message: impl Into<String>) -> Error {
    Error::Checkpoint(format!("payload: {}", message.into()))
}

/// Rebuilds a model from a header and its payload bytes.
pub fn decode_checkpoint(header_text: &str, payload: &[u8]) -> Result<TrainedDenoiser> {
    let h = CheckpointHeader::parse(header_text)?;
    if payload.len() < 16 || payload[..8] != PARAM_MAGIC {
        return Err(payload_error("missing parameter magic"));
    }
    let count = u64::from_le_bytes(payload[8..16].try_into().expect("8 bytes"));
    if count != h.param_count as u64 {
        return Err(payload_error(format!("payload holds {count} parameters, header says {}", h.param_count)));
    }
    let body = &payload[16..];
    if body.len() as u64 != count * 4 {
        return Err(payload_error(format!("payload body is {} bytes, expected {}", body.len(), count * 4)));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let model = DenoiserModel::from_params(h.architecture, params)?;
    TrainedDenoiser::new(model, h.inputs, h.groups, h.channel_groups, h.speed)
}

/// Payload bytes; parameters are rounded to `f32`.
pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.len());
    out.extend_from_slice(&PARAM_MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

/// Writes `<stem>.toml` at `path` and the payload next to it as
/// `<stem>.params`.
pub fn write_checkpoint(model: &TrainedDenoiser, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", path.display())))?;
    let payload_name = format!("{stem}.params");
    let header = CheckpointHeader {
        format: FORMAT_NAME.into(),
        version: VERSION,
        payload: payload_name.clone(),
        param_count: model.model.param_count(),
        inputs: model.inputs.clone(),
        groups: model.groups.clone(),
        channel_groups: model.channel_groups.clone(),
        architecture: *model.model.architecture(),
        speed: model.speed,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::write(dir.join(&payload_name), encode_params(model.model.params())).map_err(|e| Error::io(dir.join(&payload_name), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedDenoiser> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h = CheckpointHeader::parse(&text)?;
    if h.payload.contains('/') || h.payload.contains('\\') || h.payload.starts_with("..") {
        return Err(Error::invalid(format!("payload {} must be a sibling file name", h.payload)));
    }
    let p = path.parent().unwrap_or(Path::new(".")).join(&h.payload);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    decode_checkpoint(&text, &bytes)
}
