//! Variance-preserving forward process, parameter conversions and reverse
//! samplers.

mod sampler;
mod schedule;

pub use sampler::{
    ddpm_step, dpmpp_update, gaussian_like, sample, sample_from, sample_member, step_coefficients, DpmppState,
    SamplerConfig, SamplerMethod, StepCoefficients,
};
pub use schedule::{
    eps_to_score, eps_to_x0, forward_diffuse, score_to_eps, x0_to_eps, DenoiserOutput, NoiseSchedule,
    ScheduleConfig,
};
