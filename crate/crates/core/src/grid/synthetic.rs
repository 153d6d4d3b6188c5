//! Deterministic synthetic paired wind fields.
//!
//! Terrain is smoothed band-limited noise. The high-resolution wind is a
//! large-scale flow sped up over ridges and deflected along terrain
//! gradients, plus small-scale turbulence. Low-resolution inputs are
//! coarsened high-resolution fields with a smooth additive bias and a little
//! noise, so the two resolutions do not share a distribution.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::names::*;
use super::transform::{coarsen, decode_direction};
use super::{
    ConditioningSet, Encoding, FieldGrid, Resolution, SamplePair, StandardizationStats,
    VariableKind, VariableSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub hr_size: usize,
    pub scale_factor: usize,
    /// Peak amplitude of the low-resolution speed bias, m/s.
    pub bias_amplitude: f64,
    /// Standard deviation of low-resolution observation noise, m/s.
    pub noise_amplitude: f64,
    /// Relative amplitude of unpredictable small-scale turbulence.
    pub turbulence: f64,
    /// Terrain relief, m.
    pub relief: f64,
    /// Fractional speed-up per terrain standard deviation.
    pub speedup: f64,
    pub deflection: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            hr_size: 32,
            scale_factor: 8,
            bias_amplitude: 1.5,
            noise_amplitude: 0.3,
            turbulence: 0.08,
            relief: 600.0,
            speedup: 0.35,
            deflection: 0.6,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor == 0 || self.hr_size == 0 || self.hr_size % self.scale_factor != 0 {
            return Err(Error::dim(format!(
                "hr size {} must be a positive multiple of scale factor {}",
                self.hr_size, self.scale_factor
            )));
        }
        for (name, v) in [
            ("bias_amplitude", self.bias_amplitude),
            ("noise_amplitude", self.noise_amplitude),
            ("turbulence", self.turbulence),
            ("relief", self.relief),
            ("speedup", self.speedup),
            ("deflection", self.deflection),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Static terrain shared by every timestamp of a domain.
#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    seed: u64,
    config: SyntheticConfig,
    terrain: FieldGrid,
    land_use: FieldGrid,
    /// Normalized terrain and its gradient, per cell.
    relief_norm: Vec<f64>,
    grad: Vec<(f64, f64)>,
    bias_phase: (f64, f64),
}

/// Sum of random cosines over integer wavenumbers in `[k_min, k_max]`,
/// normalized to zero mean and unit standard deviation.
fn band_limited(rng: &mut ChaCha8Rng, n: usize, k_min: i32, k_max: i32) -> Vec<f64> {
    let mut waves = Vec::new();
    for ky in -k_max..=k_max {
        for kx in 0..=k_max {
            let k2 = kx * kx + ky * ky;
            if k2 < k_min * k_min || k2 > k_max * k_max || (kx == 0 && ky <= 0) {
                continue;
            }
            let amp: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 + k2 as f64);
            let phase = rng.gen_range(0.0..2.0 * PI);
            waves.push((kx as f64, ky as f64, amp, phase));
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = waves
                .iter()
                .map(|&(kx, ky, a, p)| a * (2.0 * PI * (kx * x as f64 + ky * y as f64) / n as f64 + p).cos())
                .sum();
        }
    }
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

fn gradient(v: &[f64], n: usize) -> Vec<(f64, f64)> {
    let at = |y: usize, x: usize| v[y * n + x];
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let gx = if n == 1 {
                0.0
            } else if x == 0 {
                at(y, 1) - at(y, 0)
            } else if x == n - 1 {
                at(y, x) - at(y, x - 1)
            } else {
                0.5 * (at(y, x + 1) - at(y, x - 1))
            };
            let gy = if n == 1 {
                0.0
            } else if y == 0 {
                at(1, x) - at(0, x)
            } else if y == n - 1 {
                at(y, x) - at(y - 1, x)
            } else {
                0.5 * (at(y + 1, x) - at(y - 1, x))
            };
            out.push((gx, gy));
        }
    }
    out
}

fn grid(n: usize, values: Vec<f64>, units: &str) -> Result<FieldGrid> {
    Ok(FieldGrid::new(n, n, values, units)?.quantized())
}

fn input(name: &str, resolution: Resolution, encoding: Encoding) -> VariableSpec {
    VariableSpec::new(name, VariableKind::Input, resolution, encoding)
}

impl SyntheticDomain {
    pub fn new(domain_seed: u64, config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let n = config.hr_size;
        let mut rng = seed::rng_for(domain_seed, 0x7e44a1);
        let relief_norm = band_limited(&mut rng, n, 1, 4);
        let lo = relief_norm.iter().cloned().fold(f64::INFINITY, f64::min);
        let terrain_vals: Vec<f64> = relief_norm.iter().map(|v| (v - lo) * config.relief / 4.0).collect();
        let terrain = grid(n, terrain_vals, "m")?;
        // Scale the gradient so a typical slope is O(1) regardless of grid size.
        let mut grad = gradient(&relief_norm, n);
        let rms = (grad.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / grad.len() as f64).sqrt();
        if rms > 1e-12 {
            grad.iter_mut().for_each(|g| *g = (g.0 / rms, g.1 / rms));
        }
        let patches = band_limited(&mut rng, n, 3, 6);
        let land_use: Vec<f64> = relief_norm
            .iter()
            .zip(&patches)
            .map(|(h, p)| (12.0 + 4.0 * h + 3.0 * p).round().clamp(1.0, 24.0))
            .collect();
        let land_use = grid(n, land_use, "category")?;
        let bias_phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        Ok(Self {
            seed: domain_seed,
            config,
            terrain,
            land_use,
            relief_norm,
            grad,
            bias_phase,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn terrain(&self) -> &FieldGrid {
        &self.terrain
    }

    /// One timestamp. Standardization statistics are computed from this pair
    /// alone; datasets replace them with domain-wide statistics.
    pub fn pair(&self, timestamp_seed: u64, timestamp_id: impl Into<String>) -> Result<SamplePair> {
        let cfg = &self.config;
        let n = cfg.hr_size;
        let s = cfg.scale_factor;
        let ln = n / s;
        let mut rng = seed::rng_for(seed::derive(self.seed, timestamp_seed), 0x71e5);

        let base_speed: f64 = rng.gen_range(3.0..12.0);
        let base_from: f64 = rng.gen_range(0.0..360.0);
        let (bs, bc) = base_from.to_radians().sin_cos();
        // Flow points away from the direction it comes from.
        let (u0, v0) = (-base_speed * bs, -base_speed * bc);
        let synoptic = band_limited(&mut rng, n, 1, 1);
        let swirl = band_limited(&mut rng, n, 1, 1);
        let turb_u = band_limited(&mut rng, n, 3, 7);
        let turb_v = band_limited(&mut rng, n, 3, 7);

        let mut u = vec![0.0; n * n];
        let mut v = vec![0.0; n * n];
        for i in 0..n * n {
            let mut uu = u0 * (1.0 + 0.15 * synoptic[i]) + 0.1 * base_speed * swirl[i] * bc;
            let mut vv = v0 * (1.0 + 0.15 * synoptic[i]) - 0.1 * base_speed * swirl[i] * bs;
            let up = (1.0 + cfg.speedup * self.relief_norm[i]).max(0.2);
            uu *= up;
            vv *= up;
            let (gx, gy) = self.grad[i];
            let along = (uu * gx + vv * gy) / (1.0 + gx * gx + gy * gy);
            uu -= cfg.deflection * along * gx;
            vv -= cfg.deflection * along * gy;
            uu += cfg.turbulence * base_speed * turb_u[i];
            vv += cfg.turbulence * base_speed * turb_v[i];
            u[i] = uu;
            v[i] = vv;
        }
        let hr_speed = grid(n, u.iter().zip(&v).map(|(a, b)| a.hypot(*b)).collect(), "m/s")?;
        let hr_dir = grid(
            n,
            u.iter().zip(&v).map(|(a, b)| decode_direction(-a, -b)).collect(),
            "degrees",
        )?;

        let u_lr = coarsen(&FieldGrid::new(n, n, u, "m/s")?, s)?;
        let v_lr = coarsen(&FieldGrid::new(n, n, v, "m/s")?, s)?;
        let terrain_lr = coarsen(&self.terrain, s)?;
        let speed_lr = coarsen(&hr_speed, s)?;
        let amp_jitter: f64 = rng.gen_range(0.8..1.2);
        let mut lr_speed = Vec::with_capacity(ln * ln);
        let mut lr_dir = Vec::with_capacity(ln * ln);
        for y in 0..ln {
            for x in 0..ln {
                let i = y * ln + x;
                let (fy, fx) = ((y as f64 + 0.5) / ln as f64, (x as f64 + 0.5) / ln as f64);
                let bias = cfg.bias_amplitude
                    * amp_jitter
                    * (2.0 * PI * fx + self.bias_phase.0).sin()
                    * (PI * fy + self.bias_phase.1).cos();
                let eps: f64 = rng.sample(StandardNormal);
                let mut sp = speed_lr.values()[i] + bias + cfg.noise_amplitude * eps;
                if cfg.bias_amplitude > 0.0 || cfg.noise_amplitude > 0.0 {
                    sp = sp.max(0.0);
                }
                lr_speed.push(sp);
                let deps: f64 = rng.sample(StandardNormal);
                let d = decode_direction(-u_lr.values()[i], -v_lr.values()[i])
                    + 10.0 * cfg.noise_amplitude * deps;
                lr_dir.push(d.rem_euclid(360.0));
            }
        }

        let mut pressure = Vec::with_capacity(ln * ln);
        let mut temperature = Vec::with_capacity(ln * ln);
        let mut precip = Vec::with_capacity(ln * ln);
        let mut blh = Vec::with_capacity(ln * ln);
        let t_offset: f64 = rng.gen_range(-6.0..6.0);
        for i in 0..ln * ln {
            let h = terrain_lr.values()[i];
            let sp = speed_lr.values()[i];
            let e: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            pressure.push(1013.0 - 0.12 * h - 0.4 * sp + 0.5 * e[0]);
            temperature.push(283.0 + t_offset - 0.0065 * h + 0.3 * e[1]);
            precip.push((0.4 * e[2] + 0.05 * sp - 0.3).max(0.0));
            blh.push(300.0 + 60.0 * sp + 40.0 * e[3]);
        }

        let hr_targets = vec![
            (
                VariableSpec::new(HR_SPEED, VariableKind::Target, Resolution::High, Encoding::Scalar),
                hr_speed,
            ),
            (
                VariableSpec::new(
                    HR_DIRECTION,
                    VariableKind::Target,
                    Resolution::High,
                    Encoding::DirectionSincos,
                ),
                hr_dir,
            ),
        ];
        let vars = vec![
            (input(TOPOGRAPHY, Resolution::Static, Encoding::Scalar), self.terrain.clone()),
            (input(LAND_USE, Resolution::Static, Encoding::Scalar), self.land_use.clone()),
            (input(LR_SPEED, Resolution::Low, Encoding::Scalar), grid(ln, lr_speed, "m/s")?),
            (
                input(LR_DIRECTION, Resolution::Low, Encoding::DirectionSincos),
                grid(ln, lr_dir, "degrees")?,
            ),
            (input(SURFACE_PRESSURE, Resolution::Low, Encoding::Scalar), grid(ln, pressure, "hPa")?),
            (input(TEMPERATURE_2M, Resolution::Low, Encoding::Scalar), grid(ln, temperature, "K")?),
            (input(TOTAL_PRECIPITATION, Resolution::Low, Encoding::Scalar), grid(ln, precip, "mm")?),
            (input(BOUNDARY_LAYER_HEIGHT, Resolution::Low, Encoding::Scalar), grid(ln, blh, "m")?),
        ];
        let conditioning = ConditioningSet::new(vars)?;
        let mut stats = StandardizationStats::new();
        for (spec, g) in conditioning.variables() {
            if spec.encoding == Encoding::Scalar {
                let st = StandardizationStats::from_grids([g])?;
                stats.insert(&spec.name, st.mean, st.std)?;
            }
        }
        SamplePair::new(hr_targets, conditioning, stats, timestamp_id)
    }
}

/// A self-contained pair: domain and timestamp both derive from `seed`.
pub fn generate_synthetic_pair(seed: u64, hr_size: usize, scale_factor: usize) -> Result<SamplePair> {
    let config = SyntheticConfig {
        hr_size,
        scale_factor,
        ..SyntheticConfig::default()
    };
    SyntheticDomain::new(seed, config)?.pair(seed, format!("synthetic-{seed}"))
}
