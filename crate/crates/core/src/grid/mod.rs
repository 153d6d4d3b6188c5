//! Paired wind-field domain types and their preprocessing.
//!
//! A [`SamplePair`] holds one timestamp: high-resolution targets (speed and
//! direction), the conditioning variables, and the standardization statistics
//! used to turn physical values into model space. Dropout is represented by a
//! presence flag per dropout group; grids are never mutated when a group is
//! dropped, the zeros only appear at assembly time.

mod dataset;
mod synthetic;
mod transform;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{
    check_payload_header, decode_record, read_dataset, write_dataset, Dataset, Manifest, ManifestRecord,
    ManifestVariable, PAYLOAD_MAGIC, RECORD_MAGIC,
};
pub use synthetic::{generate_synthetic_pair, SyntheticConfig, SyntheticDomain};
pub use transform::{
    bicubic_upsample, coarsen, decode_direction, destandardize, encode_direction,
    standardize, upsample_bilinear,
};

/// A single-variable 2-D grid in physical units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
    units: String,
}

impl FieldGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>, units: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("grid dimensions must be at least 1"));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
            units: units.into(),
        })
    }

    pub fn constant(height: usize, width: usize, value: f64, units: impl Into<String>) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], units)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<FieldGrid> {
        FieldGrid::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
            self.units.clone(),
        )
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<FieldGrid> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            values.extend_from_slice(&self.values[y * self.width + left..y * self.width + left + width]);
        }
        FieldGrid::new(height, width, values, self.units.clone())
    }

    /// Rounds every value through `f32`, making the grid exactly representable
    /// in the on-disk payload format.
    pub fn quantized(&self) -> FieldGrid {
        FieldGrid {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableKind {
    Target,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    High,
    Low,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Scalar,
    DirectionSincos,
}

impl Encoding {
    pub fn channel_count(self) -> usize {
        match self {
            Encoding::Scalar => 1,
            Encoding::DirectionSincos => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub resolution: Resolution,
    pub encoding: Encoding,
    pub dropout_group: String,
}

impl VariableSpec {
    pub fn new(
        name: &str,
        kind: VariableKind,
        resolution: Resolution,
        encoding: Encoding,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind,
            resolution,
            encoding,
            dropout_group: name.to_string(),
        }
    }

    /// Name of the statistics entry this variable is standardized with, or
    /// `None` for direction variables (encoded as sine/cosine instead).
    pub fn stats_key(&self) -> Option<&str> {
        match self.encoding {
            Encoding::DirectionSincos => None,
            // Both speed resolutions share the low-resolution speed statistics.
            Encoding::Scalar if self.name.ends_with("speed") => Some(names::LR_SPEED),
            Encoding::Scalar => Some(&self.name),
        }
    }
}

/// Canonical variable names of the paired wind dataset.
pub mod names {
    pub const HR_SPEED: &str = "hr_speed";
    pub const HR_DIRECTION: &str = "hr_direction";
    pub const TOPOGRAPHY: &str = "topography";
    pub const LAND_USE: &str = "land_use";
    pub const LR_SPEED: &str = "lr_speed";
    pub const LR_DIRECTION: &str = "lr_direction";
    pub const SURFACE_PRESSURE: &str = "surface_pressure";
    pub const TEMPERATURE_2M: &str = "temperature_2m";
    pub const TOTAL_PRECIPITATION: &str = "total_precipitation";
    pub const BOUNDARY_LAYER_HEIGHT: &str = "boundary_layer_height";

    /// Inputs of the basic setup: topography plus low-resolution wind.
    pub const BASIC_INPUTS: [&str; 3] = [TOPOGRAPHY, LR_SPEED, LR_DIRECTION];

    pub const ALL_INPUTS: [&str; 8] = [
        TOPOGRAPHY,
        LAND_USE,
        LR_SPEED,
        LR_DIRECTION,
        SURFACE_PRESSURE,
        TEMPERATURE_2M,
        TOTAL_PRECIPITATION,
        BOUNDARY_LAYER_HEIGHT,
    ];
}

/// Which conditioning variables a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VariableSetup {
    #[default]
    Basic,
    All,
}

impl VariableSetup {
    pub fn input_names(self) -> &'static [&'static str] {
        match self {
            VariableSetup::Basic => &names::BASIC_INPUTS,
            VariableSetup::All => &names::ALL_INPUTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Per-variable standardization statistics, keyed by variable name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StandardizationStats {
    entries: BTreeMap<String, Stat>,
}

impl StandardizationStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "statistics for {name} need finite mean and std > 0, got mean {mean}, std {std}"
            )));
        }
        self.entries.insert(name.to_string(), Stat { mean, std });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Stat> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no standardization statistics for {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in &self.entries {
            if !(s.std > 0.0) || !s.std.is_finite() || !s.mean.is_finite() {
                return Err(Error::invalid(format!("invalid statistics for {name}")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Stat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Mean and population standard deviation over all values of the grids.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a FieldGrid>) -> Result<Stat> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for g in grids {
            for &v in g.values() {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::invalid("statistics over empty grid set"));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        // Constant fields (e.g. flat terrain) still need a usable scale.
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Ok(Stat { mean, std })
    }
}

/// Bitmask over an ordered list of dropout groups; bit `i` set means group
/// `i` is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GroupMask(pub u64);

impl GroupMask {
    pub const EMPTY: GroupMask = GroupMask(0);

    pub fn full(k: usize) -> Self {
        assert!(k <= 64, "at most 64 dropout groups");
        if k == 64 {
            GroupMask(u64::MAX)
        } else {
            GroupMask((1u64 << k) - 1)
        }
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        GroupMask(self.0 | 1 << i)
    }

    pub fn without(self, i: usize) -> Self {
        GroupMask(self.0 & !(1 << i))
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// The ordered conditioning variables of one sample with a presence flag per
/// dropout group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    variables: Vec<(VariableSpec, FieldGrid)>,
    groups: Vec<String>,
    presence: Vec<bool>,
}

impl ConditioningSet {
    pub fn new(variables: Vec<(VariableSpec, FieldGrid)>) -> Result<Self> {
        let mut groups: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for (spec, grid) in &variables {
            if spec.kind != VariableKind::Input {
                return Err(Error::invalid(format!("{} is not an input variable", spec.name)));
            }
            if !seen.insert(spec.name.clone()) {
                return Err(Error::invalid(format!("duplicate variable {}", spec.name)));
            }
            if spec.encoding == Encoding::DirectionSincos && grid.units() != "degrees" {
                return Err(Error::invalid(format!(
                    "direction variable {} must be in degrees",
                    spec.name
                )));
            }
            if !groups.contains(&spec.dropout_group) {
                groups.push(spec.dropout_group.clone());
            }
        }
        let presence = vec![true; groups.len()];
        Ok(Self {
            variables,
            groups,
            presence,
        })
    }

    pub fn variables(&self) -> &[(VariableSpec, FieldGrid)] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Option<&FieldGrid> {
        self.variables
            .iter()
            .find(|(s, _)| s.name == name)
            .map(|(_, g)| g)
    }

    /// Dropout groups in order of first appearance.
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_index(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }

    pub fn is_present(&self, group: &str) -> bool {
        self.group_index(group).map(|i| self.presence[i]).unwrap_or(false)
    }

    pub fn presence_mask(&self) -> GroupMask {
        self.presence
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .fold(GroupMask::EMPTY, |m, (i, _)| m.with(i))
    }

    /// Same variables, with presence replaced by `mask`.
    pub fn with_presence(&self, mask: GroupMask) -> ConditioningSet {
        let mut out = self.clone();
        for (i, p) in out.presence.iter_mut().enumerate() {
            *p = mask.contains(i);
        }
        out
    }

    /// Keeps only the named variables, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<ConditioningSet> {
        let mut vars = Vec::with_capacity(names.len());
        for name in names {
            let var = self
                .variables
                .iter()
                .find(|(s, _)| s.name == *name)
                .ok_or_else(|| Error::invalid(format!("missing conditioning variable {name}")))?;
            vars.push(var.clone());
        }
        let mut out = ConditioningSet::new(vars)?;
        for (i, g) in out.groups.clone().iter().enumerate() {
            out.presence[i] = self.is_present(g);
        }
        Ok(out)
    }

    /// Number of channels after assembly; direction variables take two.
    pub fn channel_count(&self) -> usize {
        self.variables.iter().map(|(s, _)| s.encoding.channel_count()).sum()
    }

    /// Dropout-group index for every assembled channel.
    pub fn channel_groups(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (spec, _) in &self.variables {
            let g = self.group_index(&spec.dropout_group).expect("group registered");
            out.extend(std::iter::repeat(g).take(spec.encoding.channel_count()));
        }
        out
    }

    /// Builds the model-space conditioning tensor at `(height, width)`:
    /// low-resolution variables are bilinearly upsampled, scalars are
    /// standardized, directions become (sin, cos), and variables of absent
    /// groups contribute zeros.
    pub fn assemble(&self, height: usize, width: usize, stats: &StandardizationStats) -> Result<Tensor> {
        let mut out = Tensor::zeros(self.channel_count(), height, width);
        let mut c = 0;
        for (spec, grid) in &self.variables {
            let n = spec.encoding.channel_count();
            let g = self.group_index(&spec.dropout_group).expect("group registered");
            if !self.presence[g] {
                c += n;
                continue;
            }
            let full = match spec.resolution {
                Resolution::Low => {
                    if height % grid.height() != 0 || width % grid.width() != 0 {
                        return Err(Error::dim(format!(
                            "{} grid {:?} does not divide {height}x{width}",
                            spec.name,
                            grid.shape()
                        )));
                    }
                    let factor = height / grid.height();
                    if width / grid.width() != factor {
                        return Err(Error::dim(format!("{} has anisotropic scale", spec.name)));
                    }
                    upsample_bilinear(grid, factor)?
                }
                Resolution::High | Resolution::Static => {
                    if grid.shape() != (height, width) {
                        return Err(Error::dim(format!(
                            "{} grid {:?} does not match {height}x{width}",
                            spec.name,
                            grid.shape()
                        )));
                    }
                    grid.clone()
                }
            };
            match spec.encoding {
                Encoding::Scalar => {
                    let key = spec.stats_key().expect("scalar variables have stats");
                    let st = stats.get(key)?;
                    for (dst, &v) in out.channel_mut(c).iter_mut().zip(full.values()) {
                        *dst = (v - st.mean) / st.std;
                    }
                }
                Encoding::DirectionSincos => {
                    // Interpolating angles directly would wrap badly; go
                    // through the encoded components of the low-res grid.
                    let (s, co) = if spec.resolution == Resolution::Low {
                        let (sl, cl) = direction_components(grid)?;
                        let f = height / grid.height();
                        (upsample_bilinear(&sl, f)?, upsample_bilinear(&cl, f)?)
                    } else {
                        direction_components(&full)?
                    };
                    out.channel_mut(c).copy_from_slice(s.values());
                    out.channel_mut(c + 1).copy_from_slice(co.values());
                }
            }
            c += n;
        }
        Ok(out)
    }
}

fn direction_components(grid: &FieldGrid) -> Result<(FieldGrid, FieldGrid)> {
    let mut s = Vec::with_capacity(grid.values().len());
    let mut c = Vec::with_capacity(grid.values().len());
    for &deg in grid.values() {
        let (a, b) = encode_direction(deg)?;
        s.push(a);
        c.push(b);
    }
    Ok((
        FieldGrid::new(grid.height(), grid.width(), s, "1")?,
        FieldGrid::new(grid.height(), grid.width(), c, "1")?,
    ))
}

/// Marks the named dropout groups absent. Grids are untouched; only the
/// presence mask changes.
pub fn apply_dropout(cond: &ConditioningSet, dropped_groups: &BTreeSet<String>) -> Result<ConditioningSet> {
    let mut out = cond.clone();
    for g in dropped_groups {
        let i = cond
            .group_index(g)
            .ok_or_else(|| Error::invalid(format!("unknown dropout group {g}")))?;
        out.presence[i] = false;
    }
    Ok(out)
}

/// One timestamp of paired data.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub hr_targets: Vec<(VariableSpec, FieldGrid)>,
    pub conditioning: ConditioningSet,
    pub stats: StandardizationStats,
    pub timestamp_id: String,
}

impl SamplePair {
    pub fn new(
        hr_targets: Vec<(VariableSpec, FieldGrid)>,
        conditioning: ConditioningSet,
        stats: StandardizationStats,
        timestamp_id: impl Into<String>,
    ) -> Result<Self> {
        let pair = Self {
            hr_targets,
            conditioning,
            stats,
            timestamp_id: timestamp_id.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.hr_shape()?;
        for (spec, g) in &self.hr_targets {
            if spec.kind != VariableKind::Target {
                return Err(Error::invalid(format!("{} is not a target", spec.name)));
            }
            if g.shape() != (h, w) {
                return Err(Error::dim(format!("target {} shape {:?} != {h}x{w}", spec.name, g.shape())));
            }
        }
        let scale = self.scale_factor()?;
        for (spec, g) in self.conditioning.variables() {
            let expected = match spec.resolution {
                Resolution::Low => (h / scale, w / scale),
                _ => (h, w),
            };
            if g.shape() != expected {
                return Err(Error::dim(format!(
                    "{} shape {:?} != expected {:?}",
                    spec.name,
                    g.shape(),
                    expected
                )));
            }
        }
        self.stats.validate()
    }

    pub fn hr_shape(&self) -> Result<(usize, usize)> {
        self.hr_targets
            .first()
            .map(|(_, g)| g.shape())
            .ok_or_else(|| Error::invalid("sample pair has no targets"))
    }

    /// Ratio of high- to low-resolution grid size; 1 when there are no
    /// low-resolution inputs.
    pub fn scale_factor(&self) -> Result<usize> {
        let (h, w) = self.hr_shape()?;
        match self
            .conditioning
            .variables()
            .iter()
            .find(|(s, _)| s.resolution == Resolution::Low)
        {
            None => Ok(1),
            Some((spec, g)) => {
                if h % g.height() != 0 || w % g.width() != 0 || h / g.height() != w / g.width() {
                    return Err(Error::dim(format!(
                        "{} shape {:?} is not an exact divisor of {h}x{w}",
                        spec.name,
                        g.shape()
                    )));
                }
                Ok(h / g.height())
            }
        }
    }

    pub fn target(&self, name: &str) -> Option<&FieldGrid> {
        self.hr_targets.iter().find(|(s, _)| s.name == name).map(|(_, g)| g)
    }

    pub fn hr_speed(&self) -> Result<&FieldGrid> {
        self.target(names::HR_SPEED)
            .ok_or_else(|| Error::invalid("pair has no hr_speed target"))
    }

    /// Model-space target tensor: standardized speed, then sin and cos of
    /// the direction.
    pub fn target_tensor(&self) -> Result<Tensor> {
        let speed = self.hr_speed()?;
        let dir = self
            .target(names::HR_DIRECTION)
            .ok_or_else(|| Error::invalid("pair has no hr_direction target"))?;
        let st = self.stats.get(names::LR_SPEED)?;
        let (h, w) = speed.shape();
        let mut out = Tensor::zeros(TARGET_CHANNELS, h, w);
        for (i, (&s, &d)) in speed.values().iter().zip(dir.values()).enumerate() {
            let (sn, cs) = encode_direction(d)?;
            out.data_mut()[i] = (s - st.mean) / st.std;
            out.data_mut()[h * w + i] = sn;
            out.data_mut()[2 * h * w + i] = cs;
        }
        Ok(out)
    }

    /// Physical speed (m/s) from a model-space target tensor.
    pub fn speed_from_tensor(&self, t: &Tensor) -> Result<FieldGrid> {
        let st = self.stats.get(names::LR_SPEED)?;
        FieldGrid::new(
            t.height(),
            t.width(),
            t.channel(0).iter().map(|v| v * st.std + st.mean).collect(),
            "m/s",
        )
    }

    /// Conditioning tensor at the high-resolution shape.
    pub fn assemble_conditioning(&self) -> Result<Tensor> {
        let (h, w) = self.hr_shape()?;
        self.conditioning.assemble(h, w, &self.stats)
    }

    /// Restricts the conditioning to the given input variables.
    pub fn with_inputs(&self, names: &[&str]) -> Result<SamplePair> {
        Ok(SamplePair {
            conditioning: self.conditioning.select(names)?,
            ..self.clone()
        })
    }
}

/// Number of model-space target channels (speed, sin, cos).
pub const TARGET_CHANNELS: usize = 3;

/// Crops a pair to `size` x `size` high-resolution cells. The offset is a
/// multiple of the scale factor so the low-resolution crop stays aligned.
/// `centered` crops are deterministic; otherwise the offset comes from
/// `rng_seed`.
pub fn sample_crop(pair: &SamplePair, size: usize, rng_seed: u64, centered: bool) -> Result<SamplePair> {
    let (h, w) = pair.hr_shape()?;
    let scale = pair.scale_factor()?;
    if size == 0 || size > h || size > w {
        return Err(Error::dim(format!("crop size {size} does not fit {h}x{w}")));
    }
    if size % scale != 0 {
        return Err(Error::dim(format!("crop size {size} not divisible by scale factor {scale}")));
    }
    let (lr_h, lr_w, lr_size) = (h / scale, w / scale, size / scale);
    let (oy, ox) = if centered {
        ((lr_h - lr_size) / 2, (lr_w - lr_size) / 2)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        (rng.gen_range(0..=lr_h - lr_size), rng.gen_range(0..=lr_w - lr_size))
    };
    let crop_var = |spec: &VariableSpec, g: &FieldGrid| -> Result<FieldGrid> {
        match spec.resolution {
            Resolution::Low => g.crop(oy, ox, lr_size, lr_size),
            _ => g.crop(oy * scale, ox * scale, size, size),
        }
    };
    let hr_targets = pair
        .hr_targets
        .iter()
        .map(|(s, g)| Ok((s.clone(), crop_var(s, g)?)))
        .collect::<Result<Vec<_>>>()?;
    let vars = pair
        .conditioning
        .variables()
        .iter()
        .map(|(s, g)| Ok((s.clone(), crop_var(s, g)?)))
        .collect::<Result<Vec<_>>>()?;
    let conditioning = ConditioningSet::new(vars)?.with_presence(pair.conditioning.presence_mask());
    SamplePair::new(hr_targets, conditioning, pair.stats.clone(), pair.timestamp_id.clone())
}
