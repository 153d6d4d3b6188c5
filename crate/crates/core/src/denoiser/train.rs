use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{l1_denoise_loss, total_loss_grad, LossWeights};
use super::TrainedDenoiser;
use crate::diffusion::{forward_diffuse, gaussian_like, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::{Dataset, GroupMask};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached after warmup.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Independent dropout probability of every conditioning group.
    pub p_drop: f64,
    pub loss_weights: LossWeights,
    /// Side of the random square crop taken from each example; whole
    /// examples when absent.
    pub crop_size: Option<usize>,
    /// Crop offsets are multiples of this, keeping low-resolution cells whole.
    pub crop_align: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 100,
            p_drop: 0.1,
            loss_weights: LossWeights::default(),
            crop_size: None,
            crop_align: 8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1]", self.p_drop)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("gradient clip must be >= 0"));
        }
        if self.crop_align == 0 {
            return Err(Error::invalid("crop alignment must be >= 1"));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % 4 != 0 {
                return Err(Error::invalid(format!("crop size {c} must be a positive multiple of 4")));
            }
        }
        self.loss_weights.validate()
    }
}

/// Linear warmup to `base`, then cosine annealing to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// A model-space training example at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub target: Tensor,
    /// Conditioning with every group present.
    pub cond: Tensor,
}

/// Target and fully present conditioning tensors of every pair.
pub fn prepare_examples(dataset: &Dataset) -> Result<Vec<TrainingExample>> {
    dataset
        .pairs
        .iter()
        .map(|p| {
            let k = p.conditioning.groups().len();
            let cond = p.conditioning.with_presence(GroupMask::full(k));
            let (h, w) = p.hr_shape()?;
            Ok(TrainingExample {
                id: p.timestamp_id.clone(),
                target: p.target_tensor()?,
                cond: cond.assemble(h, w, &p.stats)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn to_delimited(curve: &[LossRecord]) -> String {
        let mut out = String::from("step,epoch,learning_rate,l1,total\n");
        for r in curve {
            writeln!(out, "{},{},{:.9e},{:.9e},{:.9e}", r.step, r.epoch, r.learning_rate, r.l1, r.total).expect("write to string");
        }
        out
    }
}

/// Per-step loss curve plus how often each conditioning view was trained.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    pub view_counts: BTreeMap<GroupMask, u64>,
}

fn draw_crop(ex: &TrainingExample, config: &TrainConfig, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let Some(size) = config.crop_size else {
        return Ok((ex.target.clone(), ex.cond.clone()));
    };
    let (_, h, w) = ex.target.shape();
    if size > h || size > w {
        return Err(Error::dim(format!("crop {size} larger than example {h}x{w}")));
    }
    let a = config.crop_align;
    let top = rng.gen_range(0..=(h - size) / a) * a;
    let left = rng.gen_range(0..=(w - size) / a) * a;
    Ok((ex.target.crop(top, left, size, size)?, ex.cond.crop(top, left, size, size)?))
}

/// Trains in place with Adam on the total loss. Each step draws, per batch
/// item: a crop, a timestep uniform over `1..=T`, forward noise and an
/// independent dropout decision for every conditioning group. All draws
/// come from streams of `config.seed`, so training is reproducible.
pub fn train(
    model: &mut TrainedDenoiser,
    examples: &[TrainingExample],
    config: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n_params = model.model.param_count();
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut adam = Adam::new(n_params);
    let mut report = TrainReport::default();
    let k = model.groups.len();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::rng_for(seed::derive(config.seed, 0xe9), epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.warmup_steps, config.learning_rate);
            let mut grad = vec![0.0; n_params];
            let (mut l1_sum, mut total_sum) = (0.0, 0.0);
            let scale = 1.0 / batch.len() as f64;
            for (slot, &ix) in batch.iter().enumerate() {
                let mut rng = seed::rng_for(seed::derive(config.seed, step as u64), slot as u64);
                let (target, cond) = draw_crop(&examples[ix], config, &mut rng)?;
                let t = rng.gen_range(1..=sched.len());
                let eps = gaussian_like(target.shape(), &mut rng);
                let x_t = forward_diffuse(&target, t, &eps, sched)?;
                let mut view = GroupMask::full(k);
                for g in 0..k {
                    if rng.gen::<f64>() < config.p_drop {
                        view = view.without(g);
                    }
                }
                *report.view_counts.entry(view).or_default() += 1;
                let input = model.assemble_input(&x_t, &cond, view)?;
                let (pred, tape) = model.model.forward_tape(&input, t as f64)?;
                let (loss, dpred) = total_loss_grad(&pred, &target, &config.loss_weights, model.speed)?;
                model.model.backward(&tape, &dpred.scaled(scale), Some(&mut grad))?;
                l1_sum += loss.l1;
                total_sum += loss.total;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !total_sum.is_finite() || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at step {step} (epoch {epoch}): loss {total_sum}, gradient norm {norm}"
                )));
            }
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                let c = config.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= c);
            }
            adam.step(model.model.params_mut(), &grad, lr);
            report.curve.push(LossRecord {
                step,
                epoch,
                learning_rate: lr,
                l1: l1_sum * scale,
                total: total_sum * scale,
            });
            step += 1;
        }
    }
    Ok(report)
}

/// Mean L1 error of fully conditioned clean-data predictions, one random
/// timestep and noise draw per example from streams of `eval_seed`.
pub fn validation_l1(model: &TrainedDenoiser, examples: &[TrainingExample], sched: &NoiseSchedule, eval_seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let full = GroupMask::full(model.groups.len());
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = seed::rng_for(eval_seed, i as u64);
        let t = rng.gen_range(1..=sched.len());
        let eps = gaussian_like(ex.target.shape(), &mut rng);
        let x_t = forward_diffuse(&ex.target, t, &eps, sched)?;
        let pred = model.predict_x0(&x_t, &ex.cond, t, full)?;
        total += l1_denoise_loss(&pred, &ex.target)?;
    }
    Ok(total / examples.len() as f64)
}
