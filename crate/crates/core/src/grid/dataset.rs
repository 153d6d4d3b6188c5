//! On-disk dataset: a TOML manifest plus a binary payload of little-endian
//! `f32` grids. The byte layout is documented in `docs/dataset-format.md`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    ConditioningSet, Encoding, FieldGrid, Resolution, SamplePair, StandardizationStats, VariableKind,
    VariableSpec,
};

/// First 8 bytes of every payload file.
pub const PAYLOAD_MAGIC: [u8; 8] = *b"CCFGWIND";
/// First 4 bytes of every record.
pub const RECORD_MAGIC: [u8; 4] = *b"REC1";
const PAYLOAD_VERSION: u32 = 1;
const FORMAT_NAME: &str = "ccfg-wind-pairs";
const HEADER_LEN: usize = 12;
const RECORD_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVariable {
    pub name: String,
    pub kind: VariableKind,
    pub resolution: Resolution,
    pub encoding: Encoding,
    pub dropout_group: String,
    pub units: String,
    /// Position of this variable's grid inside each record.
    pub slot: usize,
}

impl ManifestVariable {
    pub fn spec(&self) -> VariableSpec {
        VariableSpec {
            name: self.name.clone(),
            kind: self.kind,
            resolution: self.resolution,
            encoding: self.encoding,
            dropout_group: self.dropout_group.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Byte offset of the record header in the payload file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub payload: String,
    pub hr_height: usize,
    pub hr_width: usize,
    pub scale_factor: usize,
    pub variables: Vec<ManifestVariable>,
    pub stats: StandardizationStats,
    #[serde(default)]
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Parses and validates manifest text.
    pub fn parse(text: &str) -> Result<Manifest> {
        let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.format != FORMAT_NAME {
            return bad(format!("unknown format {:?}", self.format));
        }
        if self.version != PAYLOAD_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.hr_height == 0 || self.hr_width == 0 || self.scale_factor == 0 {
            return bad("grid shape and scale factor must be positive".into());
        }
        if self.hr_height % self.scale_factor != 0 || self.hr_width % self.scale_factor != 0 {
            return bad(format!(
                "hr shape {}x{} not divisible by scale factor {}",
                self.hr_height, self.hr_width, self.scale_factor
            ));
        }
        // Cap the grid size so a hostile manifest cannot request absurd allocations.
        if self.hr_height.saturating_mul(self.hr_width) > 1 << 24 {
            return bad("grid too large".into());
        }
        let mut names = BTreeSet::new();
        let mut slots = vec![false; self.variables.len()];
        for v in &self.variables {
            if !names.insert(v.name.as_str()) {
                return bad(format!("duplicate variable {}", v.name));
            }
            match slots.get_mut(v.slot) {
                Some(s) if !*s => *s = true,
                _ => return bad(format!("variable {} has invalid slot {}", v.name, v.slot)),
            }
            if v.kind == VariableKind::Target && v.resolution != Resolution::High {
                return bad(format!("target {} must be high resolution", v.name));
            }
            if let Some(key) = v.spec().stats_key() {
                if self.stats.get(key).is_err() {
                    return bad(format!("missing statistics {key} for {}", v.name));
                }
            }
        }
        if !self.variables.iter().any(|v| v.kind == VariableKind::Target) {
            return bad("no target variables".into());
        }
        self.stats.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(())
    }

    fn grid_shape(&self, spec: &VariableSpec) -> (usize, usize) {
        match spec.resolution {
            Resolution::Low => (self.hr_height / self.scale_factor, self.hr_width / self.scale_factor),
            _ => (self.hr_height, self.hr_width),
        }
    }

    /// Variables ordered by payload slot.
    fn by_slot(&self) -> Vec<&ManifestVariable> {
        let mut v: Vec<&ManifestVariable> = self.variables.iter().collect();
        v.sort_by_key(|m| m.slot);
        v
    }

    /// Number of `f32` values in one record.
    pub fn record_values(&self) -> usize {
        self.variables
            .iter()
            .map(|v| {
                let (h, w) = self.grid_shape(&v.spec());
                h * w
            })
            .sum()
    }

    pub fn record_len(&self) -> usize {
        RECORD_HEADER_LEN + 4 * self.record_values()
    }
}

/// In-memory dataset: shared variable table and statistics plus one
/// [`SamplePair`] per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variables: Vec<(VariableSpec, String)>,
    pub hr_shape: (usize, usize),
    pub scale_factor: usize,
    pub stats: StandardizationStats,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    /// Builds a dataset from pairs that share a variable table, replacing
    /// each pair's statistics with dataset-wide ones.
    pub fn from_pairs(pairs: Vec<SamplePair>) -> Result<Dataset> {
        let first = pairs.first().ok_or_else(|| Error::invalid("dataset needs at least one pair"))?;
        let hr_shape = first.hr_shape()?;
        let scale_factor = first.scale_factor()?;
        let mut variables: Vec<(VariableSpec, String)> = first
            .hr_targets
            .iter()
            .map(|(s, g)| (s.clone(), g.units().to_string()))
            .collect();
        variables.extend(
            first
                .conditioning
                .variables()
                .iter()
                .map(|(s, g)| (s.clone(), g.units().to_string())),
        );
        for p in &pairs {
            let vars: Vec<&VariableSpec> = p
                .hr_targets
                .iter()
                .map(|(s, _)| s)
                .chain(p.conditioning.variables().iter().map(|(s, _)| s))
                .collect();
            if vars.len() != variables.len() || vars.iter().zip(&variables).any(|(a, b)| *a != &b.0) {
                return Err(Error::invalid(format!(
                    "pair {} does not share the dataset variable table",
                    p.timestamp_id
                )));
            }
            if p.hr_shape()? != hr_shape {
                return Err(Error::dim(format!("pair {} has a different shape", p.timestamp_id)));
            }
        }
        let mut stats = StandardizationStats::new();
        for (spec, _) in &variables {
            if spec.kind != VariableKind::Input || spec.stats_key() != Some(spec.name.as_str()) {
                continue;
            }
            let grids = pairs.iter().filter_map(|p| p.conditioning.variable(&spec.name));
            let st = StandardizationStats::from_grids(grids)?;
            stats.insert(&spec.name, st.mean, st.std)?;
        }
        Self::assemble(pairs, variables, hr_shape, scale_factor, stats)
    }

    /// Like [`Dataset::from_pairs`], but standardizes with given statistics
    /// (typically those of a training split).
    pub fn from_pairs_with_stats(pairs: Vec<SamplePair>, stats: StandardizationStats) -> Result<Dataset> {
        stats.validate()?;
        let mut ds = Self::from_pairs(pairs)?;
        for (spec, _) in &ds.variables {
            if let Some(key) = spec.stats_key() {
                stats.get(key)?;
            }
        }
        for p in &mut ds.pairs {
            p.stats = stats.clone();
        }
        ds.stats = stats;
        Ok(ds)
    }

    fn assemble(
        pairs: Vec<SamplePair>,
        variables: Vec<(VariableSpec, String)>,
        hr_shape: (usize, usize),
        scale_factor: usize,
        stats: StandardizationStats,
    ) -> Result<Dataset> {
        let pairs = pairs
            .into_iter()
            .map(|mut p| {
                p.stats = stats.clone();
                p
            })
            .collect();
        Ok(Dataset {
            variables,
            hr_shape,
            scale_factor,
            stats,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn manifest(&self, payload: &str) -> Manifest {
        Manifest {
            format: FORMAT_NAME.into(),
            version: PAYLOAD_VERSION,
            payload: payload.into(),
            hr_height: self.hr_shape.0,
            hr_width: self.hr_shape.1,
            scale_factor: self.scale_factor,
            variables: self
                .variables
                .iter()
                .enumerate()
                .map(|(slot, (spec, units))| ManifestVariable {
                    name: spec.name.clone(),
                    kind: spec.kind,
                    resolution: spec.resolution,
                    encoding: spec.encoding,
                    dropout_group: spec.dropout_group.clone(),
                    units: units.clone(),
                    slot,
                })
                .collect(),
            stats: self.stats.clone(),
            records: Vec::new(),
        }
    }
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(payload)
}

/// Writes `<manifest_path>` and its payload next to it. Values are stored as
/// `f32`; grids that are not `f32`-representable are rounded.
pub fn write_dataset(dataset: &Dataset, manifest_path: &Path) -> Result<()> {
    let payload_name = format!(
        "{}.bin",
        manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("manifest path has no file name"))?
    );
    let mut manifest = dataset.manifest(&payload_name);
    let mut bytes = Vec::with_capacity(HEADER_LEN + dataset.len() * manifest.record_len());
    bytes.extend_from_slice(&PAYLOAD_MAGIC);
    bytes.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        manifest.records.push(ManifestRecord {
            id: pair.timestamp_id.clone(),
            offset: bytes.len() as u64,
        });
        bytes.extend_from_slice(&RECORD_MAGIC);
        bytes.extend_from_slice(&(i as u32).to_le_bytes());
        bytes.extend_from_slice(&(manifest.record_values() as u32).to_le_bytes());
        for (spec, _) in &dataset.variables {
            let grid = match spec.kind {
                VariableKind::Target => pair.target(&spec.name),
                VariableKind::Input => pair.conditioning.variable(&spec.name),
            }
            .ok_or_else(|| Error::Format {
                record: i,
                message: format!("missing variable {}", spec.name),
            })?;
            if grid.shape() != manifest.grid_shape(spec) {
                return Err(Error::Format {
                    record: i,
                    message: format!("{} has shape {:?}", spec.name, grid.shape()),
                });
            }
            for &v in grid.values() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    manifest.validate()?;
    let text = manifest.to_toml()?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    let pp = payload_path(manifest_path, &payload_name);
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))?;
    Ok(())
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Checks the payload file header.
pub fn check_payload_header(payload: &[u8]) -> Result<()> {
    if payload.len() < HEADER_LEN || payload[..8] != PAYLOAD_MAGIC {
        return Err(Error::Manifest("payload has corrupt magic bytes".into()));
    }
    let version = read_u32(&payload[8..12]);
    if version != PAYLOAD_VERSION {
        return Err(Error::Manifest(format!("unsupported payload version {version}")));
    }
    Ok(())
}

/// Decodes record `index` of `payload` under `manifest`.
pub fn decode_record(payload: &[u8], manifest: &Manifest, index: usize) -> Result<SamplePair> {
    let fail = |message: String| Error::Format { record: index, message };
    let rec = manifest
        .records
        .get(index)
        .ok_or_else(|| fail("record not listed in manifest".into()))?;
    let start = usize::try_from(rec.offset).map_err(|_| fail("offset overflows".into()))?;
    let end = start
        .checked_add(manifest.record_len())
        .ok_or_else(|| fail("record length overflows".into()))?;
    if end > payload.len() {
        return Err(fail(format!(
            "truncated: record needs bytes {start}..{end}, payload has {}",
            payload.len()
        )));
    }
    let bytes = &payload[start..end];
    if bytes[..4] != RECORD_MAGIC {
        return Err(fail("corrupt record magic bytes".into()));
    }
    let stored_index = read_u32(&bytes[4..8]) as usize;
    if stored_index != index {
        return Err(fail(format!("record header says index {stored_index}")));
    }
    let count = read_u32(&bytes[8..12]) as usize;
    if count != manifest.record_values() {
        return Err(fail(format!(
            "shape mismatch: record holds {count} values, manifest expects {}",
            manifest.record_values()
        )));
    }

    let mut grids: Vec<Option<FieldGrid>> = vec![None; manifest.variables.len()];
    let mut pos = RECORD_HEADER_LEN;
    for var in manifest.by_slot() {
        let (h, w) = manifest.grid_shape(&var.spec());
        let values: Vec<f64> = bytes[pos..pos + 4 * h * w]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        pos += 4 * h * w;
        let grid = FieldGrid::new(h, w, values, var.units.clone())
            .map_err(|e| fail(format!("{}: {e}", var.name)))?;
        let listed = manifest
            .variables
            .iter()
            .position(|v| v.name == var.name)
            .expect("variable is listed");
        grids[listed] = Some(grid);
    }

    let mut targets = Vec::new();
    let mut inputs = Vec::new();
    for (var, grid) in manifest.variables.iter().zip(grids) {
        let grid = grid.ok_or_else(|| fail(format!("missing variable {}", var.name)))?;
        match var.kind {
            VariableKind::Target => targets.push((var.spec(), grid)),
            VariableKind::Input => inputs.push((var.spec(), grid)),
        }
    }
    let cond = ConditioningSet::new(inputs).map_err(|e| fail(e.to_string()))?;
    SamplePair::new(targets, cond, manifest.stats.clone(), rec.id.clone()).map_err(|e| fail(e.to_string()))
}

/// Reads a dataset from its manifest path. Variables come back in manifest
/// listing order regardless of their payload slots.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let pp = payload_path(manifest_path, &manifest.payload);
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    check_payload_header(&payload)?;
    let pairs = (0..manifest.records.len())
        .map(|i| decode_record(&payload, &manifest, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        variables: manifest
            .variables
            .iter()
            .map(|v| (v.spec(), v.units.clone()))
            .collect(),
        hr_shape: (manifest.hr_height, manifest.hr_width),
        scale_factor: manifest.scale_factor,
        stats: manifest.stats,
        pairs,
    })
}
