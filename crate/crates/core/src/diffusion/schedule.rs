use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-beta variance-preserving schedule. Index `t` runs over `1..=T`;
/// `alpha_bar(0) = 1` is the clean-data convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for i in 0..steps {
            let b = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            prod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Noise scale `sigma_t = sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Half log signal-to-noise ratio, `ln(signal / sigma)`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.signal(t).ln() - self.sigma(t).ln()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    /// Timesteps for an `n`-step reverse process, `round(j T / n)` for
    /// `j = n, ..., 1`: uniform over `[1, T]`, always including `T`, and the
    /// full chain `T, ..., 1` when `n = T`.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.len();
        if n == 0 || n > big_t {
            return Err(Error::invalid(format!("inference steps must lie in 1..={big_t}, got {n}")));
        }
        Ok((1..=n)
            .rev()
            .map(|j| ((j * big_t) as f64 / n as f64).round() as usize)
            .collect())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps, "forward_diffuse noise")?;
    sched.check_step(t)?;
    Ok(x0.lincomb(sched.signal(t), eps, sched.sigma(t)))
}

fn check_noisy(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t == 0 {
        return Err(Error::Numeric("sigma_0 = 0: eps and score are singular at t = 0".into()));
    }
    sched.check_step(t)
}

/// Noise implied by a clean-data prediction.
pub fn x0_to_eps(x_t: &Tensor, x0_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    x_t.ensure_same_shape(x0_pred, "x0_to_eps")?;
    check_noisy(t, sched)?;
    let (a, s) = (sched.signal(t), sched.sigma(t));
    Ok(x_t.lincomb(1.0 / s, x0_pred, -a / s))
}

/// Clean-data prediction implied by a noise prediction.
pub fn eps_to_x0(x_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    x_t.ensure_same_shape(eps, "eps_to_x0")?;
    check_noisy(t, sched)?;
    let (a, s) = (sched.signal(t), sched.sigma(t));
    Ok(x_t.lincomb(1.0 / a, eps, -s / a))
}

/// Score of the noised density, `-eps / sigma_t`.
pub fn eps_to_score(eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_noisy(t, sched)?;
    Ok(eps.scaled(-1.0 / sched.sigma(t)))
}

pub fn score_to_eps(score: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_noisy(t, sched)?;
    Ok(score.scaled(-sched.sigma(t)))
}

/// A denoiser's clean-data prediction with the derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub x0_pred: Tensor,
}

impl DenoiserOutput {
    pub fn eps(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        x0_to_eps(x_t, &self.x0_pred, t, sched)
    }

    pub fn score(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        eps_to_score(&self.eps(x_t, t, sched)?, t, sched)
    }
}
