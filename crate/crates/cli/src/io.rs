//! Text artifacts: prediction files, delimited grids and 8-bit graymaps.

use std::fmt::Write as _;

use ccfg_core::grid::FieldGrid;
use ccfg_core::metrics::WindPrediction;
use ccfg_core::{Error, Result};

const PREDICTIONS_MAGIC: &str = "ccfg-predictions";
const PREDICTIONS_VERSION: u32 = 1;

/// Sampled wind for a sequence of timestamps, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub scheme: String,
    pub height: usize,
    pub width: usize,
    /// Total denoiser calls spent producing the file.
    pub nfe: u64,
    /// `(timestamp id, members)`; every entry has the same member count.
    pub entries: Vec<(String, Vec<WindPrediction>)>,
}

impl PredictionFile {
    pub fn members(&self) -> usize {
        self.entries.first().map_or(0, |(_, m)| m.len())
    }

    /// Header line, then one line per (timestamp, member, variable) holding
    /// all pixel values in row-major order. Values print in shortest
    /// round-trip form, so the text is a pure function of the data.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{PREDICTIONS_MAGIC} version={PREDICTIONS_VERSION} scheme={} height={} width={} members={} nfe={}\n",
            self.scheme,
            self.height,
            self.width,
            self.members(),
            self.nfe
        );
        for (id, members) in &self.entries {
            for (m, p) in members.iter().enumerate() {
                for (name, g) in [("speed", &p.speed), ("direction", &p.direction)] {
                    write!(out, "{id},{m},{name},").expect("string write");
                    push_values(&mut out, g.values(), ' ');
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty prediction file"))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(PREDICTIONS_MAGIC) {
            return Err(bad(0, "missing prediction file magic"));
        }
        let mut get = |key: &str| -> Result<String> {
            let f = fields.next().ok_or_else(|| bad(0, format!("missing header field {key}")))?;
            f.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(0, format!("expected {key}=..., found {f:?}")))
        };
        let num = |v: String, key: &str| v.parse::<u64>().map_err(|_| bad(0, format!("{key} is not an integer")));
        let version = num(get("version")?, "version")?;
        if version != PREDICTIONS_VERSION as u64 {
            return Err(bad(0, format!("unsupported version {version}")));
        }
        let scheme = get("scheme")?;
        let height = num(get("height")?, "height")? as usize;
        let width = num(get("width")?, "width")? as usize;
        let members = num(get("members")?, "members")? as usize;
        let nfe = num(get("nfe")?, "nfe")?;
        if height == 0 || width == 0 || members == 0 || height.saturating_mul(width) > 1 << 24 {
            return Err(bad(0, "grid and member counts must be positive and bounded"));
        }

        let mut entries: Vec<(String, Vec<WindPrediction>)> = Vec::new();
        let mut pending_speed: Option<FieldGrid> = None;
        for (i, line) in lines {
            let mut parts = line.splitn(4, ',');
            let (id, m, name, values) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                _ => return Err(bad(i, "expected id,member,variable,values")),
            };
            let m: usize = m.parse().map_err(|_| bad(i, "member is not an integer"))?;
            let vals = values
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|_| bad(i, format!("bad value {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != height * width {
                return Err(bad(i, format!("{} values, expected {}", vals.len(), height * width)));
            }
            match (name, pending_speed.take()) {
                ("speed", None) => {
                    if m == 0 {
                        entries.push((id.to_string(), Vec::with_capacity(members)));
                    }
                    let (last_id, ms) = entries.last().ok_or_else(|| bad(i, "member 0 must come first"))?;
                    if last_id != id || ms.len() != m {
                        return Err(bad(i, "members must be listed in order per timestamp"));
                    }
                    pending_speed = Some(FieldGrid::new(height, width, vals, "m/s").map_err(|e| bad(i, e.to_string()))?);
                }
                ("direction", Some(speed)) => {
                    let direction = FieldGrid::new(height, width, vals, "degrees").map_err(|e| bad(i, e.to_string()))?;
                    let (last_id, ms) = entries.last_mut().expect("speed line opened the entry");
                    if last_id != id {
                        return Err(bad(i, "direction line does not match the preceding speed line"));
                    }
                    ms.push(WindPrediction { speed, direction });
                }
                _ => return Err(bad(i, "expected alternating speed and direction lines")),
            }
        }
        if pending_speed.is_some() {
            return Err(bad(0, "file ends after a speed line"));
        }
        if entries.is_empty() || entries.iter().any(|(_, ms)| ms.len() != members) {
            return Err(bad(0, format!("every timestamp must have {members} members")));
        }
        Ok(Self {
            scheme,
            height,
            width,
            nfe,
            entries,
        })
    }
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        record: line,
        message: message.into(),
    }
}

fn push_values(out: &mut String, values: &[f64], sep: char) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        write!(out, "{v}").expect("string write");
    }
}

/// Comma-separated grid, one line per row.
pub fn grid_to_delimited(g: &FieldGrid) -> String {
    let mut out = String::new();
    for row in g.values().chunks(g.width()) {
        push_values(&mut out, row, ',');
        out.push('\n');
    }
    out
}

/// Binary 8-bit portable graymap scaled linearly from `lo` (black) to `hi`
/// (white). A degenerate range renders mid-gray.
pub fn grid_to_pgm(g: &FieldGrid, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.values().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));
    out
}

/// Value range of a grid.
pub fn range(g: &FieldGrid) -> (f64, f64) {
    g.values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
