use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{eps_to_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{evaluate_guided_eps, Denoiser, Guidance};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    Ddpm,
    DpmppMultistep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    /// Multistep order; ignored by DDPM.
    pub order: usize,
    pub seed: u64,
    pub ensemble_count: usize,
    /// Stochasticity of the DDPM update: 1 is ancestral sampling, 0 the
    /// deterministic zero-noise variant.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::DpmppMultistep,
            steps: 10,
            order: 3,
            seed: 0,
            ensemble_count: 1,
            eta: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn ddpm(steps: usize, seed: u64) -> Self {
        Self {
            method: SamplerMethod::Ddpm,
            steps,
            order: 1,
            seed,
            ensemble_count: 1,
            eta: 1.0,
        }
    }

    pub fn dpmpp(steps: usize, order: usize, seed: u64) -> Self {
        Self {
            method: SamplerMethod::DpmppMultistep,
            steps,
            order,
            seed,
            ensemble_count: 1,
            eta: 0.0,
        }
    }

    pub fn with_ensemble(mut self, n: usize) -> Self {
        self.ensemble_count = n;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(Error::invalid(format!(
                "steps must lie in 1..={}, got {}",
                sched.len(),
                self.steps
            )));
        }
        if self.ensemble_count == 0 {
            return Err(Error::invalid("ensemble_count must be >= 1"));
        }
        match self.method {
            SamplerMethod::DpmppMultistep => {
                if !(1..=3).contains(&self.order) {
                    return Err(Error::invalid(format!("multistep order must be 1, 2 or 3, got {}", self.order)));
                }
                if self.steps < self.order {
                    return Err(Error::invalid(format!(
                        "steps ({}) must be >= order ({})",
                        self.steps, self.order
                    )));
                }
            }
            SamplerMethod::Ddpm => {
                if !(self.eta.is_finite() && (0.0..=1.0).contains(&self.eta)) {
                    return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
                }
            }
        }
        Ok(())
    }
}

/// Coefficients of the reverse update `x_s = a x_t + b eps + c z` from step
/// `t` down to `s < t`, with `z` standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn step_coefficients(t: usize, s: usize, eta: f64, sched: &NoiseSchedule) -> StepCoefficients {
    debug_assert!(s < t);
    let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    let (at, st) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let a_s = ab_s.sqrt();
    let c = if s == 0 {
        0.0
    } else {
        eta * ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).sqrt()
    };
    let dir = (1.0 - ab_s - c * c).max(0.0).sqrt();
    StepCoefficients {
        a: a_s / at,
        b: dir - a_s * st / at,
        c,
    }
}

pub fn gaussian_like(shape: (usize, usize, usize), rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(c, h, w, data).expect("shape matches")
}

/// One reverse step from `t` to `prev` (`prev = t - 1` for the full chain).
/// No noise is injected when `prev = 0`, so the random stream is only
/// consumed for intermediate steps with `eta > 0`.
pub fn ddpm_step(
    x_t: &Tensor,
    guided_eps: &Tensor,
    t: usize,
    prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    x_t.ensure_same_shape(guided_eps, "ddpm_step")?;
    if t == 0 || t > sched.len() || prev >= t {
        return Err(Error::invalid(format!("invalid reverse step {t} -> {prev}")));
    }
    let k = step_coefficients(t, prev, eta, sched);
    let mut out = x_t.lincomb(k.a, guided_eps, k.b);
    if k.c > 0.0 {
        out.axpy(k.c, &gaussian_like(x_t.shape(), rng));
    }
    Ok(out)
}

/// Multistep DPM-Solver++ state: previous data predictions and their steps.
#[derive(Debug, Clone, Default)]
pub struct DpmppState {
    history: Vec<(usize, Tensor)>,
    max_order: usize,
}

impl DpmppState {
    pub fn new(max_order: usize) -> Result<Self> {
        if !(1..=3).contains(&max_order) {
            return Err(Error::invalid(format!("multistep order must be 1, 2 or 3, got {max_order}")));
        }
        Ok(Self {
            history: Vec::new(),
            max_order,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Records the data prediction at step `t` and advances `x_t` to `prev`.
    /// The effective order is limited by the history available, and the
    /// final step to `0` is always first order.
    pub fn step(&mut self, x_t: &Tensor, x0_pred: Tensor, t: usize, prev: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        x_t.ensure_same_shape(&x0_pred, "dpmpp_step")?;
        if t == 0 || prev >= t {
            return Err(Error::invalid(format!("invalid reverse step {t} -> {prev}")));
        }
        self.history.push((t, x0_pred));
        if self.history.len() > self.max_order {
            self.history.remove(0);
        }
        let order = if prev == 0 { 1 } else { self.history.len() };
        dpmpp_update(x_t, &self.history[self.history.len() - order..], prev, sched)
    }
}

/// Multistep DPM-Solver++ update of `x` (at the step of the last history
/// entry) to `prev`, using `history.len()` data predictions, newest last.
pub fn dpmpp_update(x: &Tensor, history: &[(usize, Tensor)], prev: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let n = history.len();
    let (t0, m0) = history
        .last()
        .ok_or_else(|| Error::invalid("multistep update needs at least one prediction"))?;
    let (a_s, s_s) = (sched.signal(prev), sched.sigma(prev));
    let ratio = s_s / sched.sigma(*t0);
    if prev == 0 || n == 1 {
        // exact exponential-integrator step; equals the deterministic DDIM update
        return Ok(x.lincomb(ratio, m0, a_s - ratio * sched.signal(*t0)));
    }
    let lam = |t: usize| sched.lambda(t);
    let h = lam(prev) - lam(*t0);
    let em1 = (-h).exp() - 1.0;
    let mut out = x.lincomb(ratio, m0, -a_s * em1);
    match n {
        2 => {
            let (t1, m1) = &history[0];
            let r0 = (lam(*t0) - lam(*t1)) / h;
            let d1 = m0.lincomb(1.0 / r0, m1, -1.0 / r0);
            out.axpy(-0.5 * a_s * em1, &d1);
        }
        3 => {
            let (t1, m1) = &history[1];
            let (t2, m2) = &history[0];
            let r0 = (lam(*t0) - lam(*t1)) / h;
            let r1 = (lam(*t1) - lam(*t2)) / h;
            let d1_0 = m0.lincomb(1.0 / r0, m1, -1.0 / r0);
            let d1_1 = m1.lincomb(1.0 / r1, m2, -1.0 / r1);
            let diff = d1_0.lincomb(1.0, &d1_1, -1.0);
            let mut d1 = d1_0.clone();
            d1.axpy(r0 / (r0 + r1), &diff);
            let d2 = diff.scaled(1.0 / (r0 + r1));
            out.axpy(a_s * (em1 / h + 1.0), &d1);
            out.axpy(-a_s * ((em1 + h) / (h * h) - 0.5), &d2);
        }
        _ => return Err(Error::invalid(format!("multistep order {n} not supported"))),
    }
    Ok(out)
}

/// Runs one reverse chain from `x_T`, drawing DDPM noise from `rng`.
pub fn sample_from(
    denoiser: &dyn Denoiser,
    guidance: &Guidance,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    x_big_t: Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    config.validate(sched)?;
    let ts = sched.inference_timesteps(config.steps)?;
    let mut x = x_big_t;
    let mut state = DpmppState::new(config.order.clamp(1, 3))?;
    for (j, &t) in ts.iter().enumerate() {
        let prev = ts.get(j + 1).copied().unwrap_or(0);
        let eps = evaluate_guided_eps(denoiser, &x, t, guidance, sched)?;
        x = match config.method {
            SamplerMethod::Ddpm => ddpm_step(&x, &eps, t, prev, config.eta, sched, rng)?,
            SamplerMethod::DpmppMultistep => {
                let x0 = eps_to_x0(&x, &eps, t, sched)?;
                state.step(&x, x0, t, prev, sched)?
            }
        };
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sample diverged at step {t}")));
        }
    }
    Ok(x)
}

/// Draws ensemble member `member`; its random stream is derived from the
/// config seed and the member index only.
pub fn sample_member(
    denoiser: &dyn Denoiser,
    guidance: &Guidance,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    member: usize,
) -> Result<Tensor> {
    let mut rng = seed::rng_for(config.seed, member as u64);
    let x_big_t = gaussian_like(shape, &mut rng);
    sample_from(denoiser, guidance, config, sched, x_big_t, &mut rng)
}

/// `config.ensemble_count` independent samples of the given target shape.
pub fn sample(
    denoiser: &dyn Denoiser,
    guidance: &Guidance,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
) -> Result<Vec<Tensor>> {
    config.validate(sched)?;
    (0..config.ensemble_count)
        .map(|m| sample_member(denoiser, guidance, config, sched, shape, m))
        .collect()
}
