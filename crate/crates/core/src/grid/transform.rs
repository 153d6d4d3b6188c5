use crate::error::{Error, Result};

use super::{FieldGrid, Stat};

/// Average-pools `factor` x `factor` blocks.
pub fn coarsen(grid: &FieldGrid, factor: usize) -> Result<FieldGrid> {
    if factor == 0 {
        return Err(Error::invalid("coarsening factor must be positive"));
    }
    let (h, w) = grid.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!("{h}x{w} grid is not divisible by factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    let inv = 1.0 / (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for y in oy * factor..(oy + 1) * factor {
                let row = &grid.values()[y * w + ox * factor..y * w + (ox + 1) * factor];
                acc += row.iter().sum::<f64>();
            }
            out[oy * ow + ox] = acc * inv;
        }
    }
    FieldGrid::new(oh, ow, out, grid.units())
}

/// Source coordinate of output index `i` under the align-corners convention.
fn align_corners(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear upsampling by an integer factor, align-corners convention with
/// edge clamping.
pub fn upsample_bilinear(grid: &FieldGrid, factor: usize) -> Result<FieldGrid> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (h, w) = grid.shape();
    let (oh, ow) = (h * factor, w * factor);
    let cols: Vec<(usize, usize, f64)> = (0..ow)
        .map(|x| {
            let s = align_corners(x, w, ow);
            let x0 = (s.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, s - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let s = align_corners(y, h, oh);
        let y0 = (s.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = s - y0 as f64;
        for &(x0, x1, fx) in &cols {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bot = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    FieldGrid::new(oh, ow, out, grid.units())
}

/// Keys cubic convolution kernel with a = -1/2.
fn cubic_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(i: usize, n_in: usize, n_out: usize) -> [(usize, f64); 4] {
    let s = align_corners(i, n_in, n_out);
    let base = s.floor() as isize;
    let frac = s - base as f64;
    let clamp = |j: isize| j.clamp(0, n_in as isize - 1) as usize;
    [
        (clamp(base - 1), cubic_weight(1.0 + frac)),
        (clamp(base), cubic_weight(frac)),
        (clamp(base + 1), cubic_weight(1.0 - frac)),
        (clamp(base + 2), cubic_weight(2.0 - frac)),
    ]
}

/// Separable bicubic (Keys, a = -1/2) upsampling by an integer factor with
/// align-corners sampling and clamped borders.
pub fn bicubic_upsample(grid: &FieldGrid, factor: usize) -> Result<FieldGrid> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (h, w) = grid.shape();
    let (oh, ow) = (h * factor, w * factor);
    // Rows first, then columns.
    let mut tmp = vec![0.0; h * ow];
    for x in 0..ow {
        let taps = cubic_taps(x, w, ow);
        for y in 0..h {
            tmp[y * ow + x] = taps.iter().map(|&(j, wt)| wt * grid.get(y, j)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let taps = cubic_taps(y, h, oh);
        for x in 0..ow {
            out[y * ow + x] = taps.iter().map(|&(j, wt)| wt * tmp[j * ow + x]).sum();
        }
    }
    FieldGrid::new(oh, ow, out, grid.units())
}

/// Direction in degrees to its (sin, cos) components.
pub fn encode_direction(theta_deg: f64) -> Result<(f64, f64)> {
    if !theta_deg.is_finite() {
        return Err(Error::invalid(format!("non-finite direction {theta_deg}")));
    }
    let r = theta_deg.rem_euclid(360.0).to_radians();
    Ok(r.sin_cos())
}

/// Inverse of [`encode_direction`], in `[0, 360)`.
pub fn decode_direction(sin_component: f64, cos_component: f64) -> f64 {
    let d = sin_component.atan2(cos_component).to_degrees().rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

pub fn standardize(grid: &FieldGrid, stat: Stat) -> Result<FieldGrid> {
    check_stat(stat)?;
    grid.map(|v| (v - stat.mean) / stat.std)
}

pub fn destandardize(grid: &FieldGrid, stat: Stat) -> Result<FieldGrid> {
    check_stat(stat)?;
    grid.map(|v| v * stat.std + stat.mean)
}

fn check_stat(stat: Stat) -> Result<()> {
    if !(stat.std > 0.0) || !stat.std.is_finite() {
        return Err(Error::invalid(format!("standard deviation must be > 0, got {}", stat.std)));
    }
    Ok(())
}
