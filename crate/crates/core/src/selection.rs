//! Simplex-constrained selection of composite-guidance weights with
//! periodic greedy pruning down to a subset budget.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian_like, sample_from, step_coefficients, x0_to_eps, NoiseSchedule, SamplerConfig, SamplerMethod};
use crate::error::{Error, Result};
use crate::grid::GroupMask;
use crate::guidance::{mask_string, Denoiser, Guidance, SubsetFamily, SubsetWeights};
use crate::seed;
use crate::tensor::Tensor;

/// Euclidean projection of `v` onto `{w >= 0, sum w = total}` by sorting
/// and thresholding.
pub fn project_simplex(v: &[f64], total: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid(format!("simplex total must be positive, got {total}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("cannot project a non-finite vector".into()));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - total) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Spread the rounding residue evenly over the support. Summing in sorted
    // order keeps the result independent of the input order, and equal
    // inputs stay equal.
    let kept: Vec<f64> = u.iter().map(|x| (x - theta).max(0.0)).filter(|&x| x > 0.0).collect();
    let residue = (total - kept.iter().sum::<f64>()) / kept.len().max(1) as f64;
    for x in w.iter_mut().filter(|x| **x > 0.0) {
        *x += residue;
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Largest number of omitted groups per candidate subset.
    pub max_omitted: usize,
    /// Subset budget retained at the end.
    pub budget: usize,
    pub iterations: usize,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub step_size: f64,
    pub batch: usize,
    pub inner_sampler: SamplerConfig,
    pub gradient_mode: GradientMode,
    /// Central-difference step for the finite-difference mode.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            max_omitted: 1,
            budget: 2,
            iterations: 30,
            total: 1.5,
            alpha: 0.0,
            beta: 1e-3,
            step_size: 1.0,
            batch: 4,
            inner_sampler: SamplerConfig::ddpm(5, 0),
            gradient_mode: GradientMode::FiniteDifference,
            fd_step: 1e-3,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, n_p: usize, sched: &NoiseSchedule) -> Result<()> {
        if self.budget < 1 || self.budget > n_p {
            return Err(Error::invalid(format!("budget m = {} must lie in 1..={n_p}", self.budget)));
        }
        if self.iterations < n_p - self.budget + 1 {
            return Err(Error::invalid(format!(
                "N = {} iterations cannot fit {} pruning rounds",
                self.iterations,
                n_p - self.budget
            )));
        }
        if !(self.total > 0.0 && self.total.is_finite()) {
            return Err(Error::invalid("total weight W must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step size must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("decay coefficients must be nonnegative"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if self.gradient_mode == GradientMode::Analytic && self.inner_sampler.method != SamplerMethod::Ddpm {
            return Err(Error::invalid("analytic gradients are implemented for the DDPM inner sampler"));
        }
        self.inner_sampler.validate(sched)
    }

    /// Iterations between pruning rounds, `ceil(N / (n_p - m + 1))`.
    pub fn prune_period(&self, n_p: usize) -> usize {
        self.iterations.div_ceil(n_p - self.budget + 1)
    }
}

/// One selection example: a denoiser bound to its conditioning and the
/// high-resolution truth it should reproduce.
pub struct SelectionItem<'a> {
    pub denoiser: Box<dyn Denoiser + 'a>,
    pub target: Tensor,
}

fn decay(w: &[f64], alpha: f64, beta: f64) -> f64 {
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    alpha * l1 + beta * l2
}

fn decay_gradient(w: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let l2 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter()
        .map(|&v| alpha * v.signum() * f64::from(u8::from(v != 0.0)) + if l2 > 0.0 { beta * v / l2 } else { 0.0 })
        .collect()
}

fn item_rng(noise_seed: u64, item: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng_for(noise_seed, item as u64)
}

fn check_batch(batch: &[(usize, &SelectionItem<'_>)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("selection batch is empty"));
    }
    Ok(())
}

fn sample_item(
    item: &SelectionItem<'_>,
    index: usize,
    weights: &SubsetWeights,
    config: &SelectionConfig,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Tensor> {
    let mut rng = item_rng(noise_seed, index);
    let x_big_t = gaussian_like(item.target.shape(), &mut rng);
    sample_from(
        item.denoiser.as_ref(),
        &Guidance::Composite(weights.clone()),
        &config.inner_sampler,
        sched,
        x_big_t,
        &mut rng,
    )
}

/// Mean absolute error of guided samples against their targets plus the
/// weight-decay terms `alpha |w|_1 + beta |w|_2`. Item `i` of the batch
/// draws its noise from stream `i` of `noise_seed`, so repeated calls with
/// different weights share random numbers.
pub fn selection_loss(
    weights: &SubsetWeights,
    batch: &[(usize, &SelectionItem<'_>)],
    config: &SelectionConfig,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for &(index, item) in batch {
        let x = sample_item(item, index, weights, config, sched, noise_seed)?;
        item.target.ensure_same_shape(&x, "selection target")?;
        total += x.zip_map(&item.target, |a, b| (a - b).abs()).mean();
    }
    Ok(total / batch.len() as f64 + decay(weights.weights(), config.alpha, config.beta))
}

/// Loss and its gradient in the weights by central differences.
pub fn finite_difference_gradient(
    weights: &SubsetWeights,
    batch: &[(usize, &SelectionItem<'_>)],
    config: &SelectionConfig,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let loss = selection_loss(weights, batch, config, sched, noise_seed)?;
    let h = config.fd_step;
    let mut grad = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        let mut wp = weights.weights().to_vec();
        wp[i] += h;
        let mut wm = weights.weights().to_vec();
        wm[i] -= h;
        let lp = selection_loss(&weights.probe(wp), batch, config, sched, noise_seed)?;
        let lm = selection_loss(&weights.probe(wm), batch, config, sched, noise_seed)?;
        grad.push((lp - lm) / (2.0 * h));
    }
    Ok((loss, grad))
}

/// Loss and its exact gradient in the weights, by reverse-mode
/// differentiation through the DDPM chain. The forward pass is replayed
/// with the same random stream as [`selection_loss`]; the backward pass
/// uses the denoiser's input vector-Jacobian products.
pub fn analytic_gradient(
    weights: &SubsetWeights,
    batch: &[(usize, &SelectionItem<'_>)],
    config: &SelectionConfig,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let sampler = &config.inner_sampler;
    if sampler.method != SamplerMethod::Ddpm {
        return Err(Error::Unsupported("analytic gradients need the DDPM inner sampler".into()));
    }
    let m = weights.len();
    let mut grad = vec![0.0; m];
    let mut data_loss = 0.0;
    let ts = sched.inference_timesteps(sampler.steps)?;
    for &(index, item) in batch {
        let den = item.denoiser.as_ref();
        let k = den.groups().len();
        if weights.family().universe() != den.groups() {
            return Err(Error::invalid("subset groups do not match denoiser groups"));
        }
        let guidance = Guidance::Composite(weights.clone());
        let coeffs = guidance.view_coefficients(k);
        let mut rng = item_rng(noise_seed, index);
        let mut x = gaussian_like(item.target.shape(), &mut rng);
        // forward, keeping the inputs and per-view noise predictions of every step
        let mut tape: Vec<(usize, usize, Tensor, Vec<Tensor>)> = Vec::with_capacity(ts.len());
        for (j, &t) in ts.iter().enumerate() {
            let prev = ts.get(j + 1).copied().unwrap_or(0);
            let mut eps_v = Vec::with_capacity(coeffs.len());
            let mut guided = Tensor::zeros(x.channels(), x.height(), x.width());
            for &(v, c) in &coeffs {
                let x0 = den.predict_x0(&x, t, v)?;
                let e = x0_to_eps(&x, &x0, t, sched)?;
                guided.axpy(c, &e);
                eps_v.push(e);
            }
            let sc = step_coefficients(t, prev, sampler.eta, sched);
            let mut next = x.lincomb(sc.a, &guided, sc.b);
            if sc.c > 0.0 {
                next.axpy(sc.c, &gaussian_like(x.shape(), &mut rng));
            }
            tape.push((t, prev, x, eps_v));
            x = next;
        }
        item.target.ensure_same_shape(&x, "selection target")?;
        let n = x.len() as f64;
        data_loss += x.zip_map(&item.target, |a, b| (a - b).abs()).mean();
        let mut g = x.zip_map(&item.target, |a, b| (a - b).signum() / n);
        let view_index = |mask: GroupMask| coeffs.iter().position(|(v, _)| *v == mask).expect("view evaluated");
        let uncond = view_index(GroupMask::EMPTY);
        for (t, prev, x_t, eps_v) in tape.iter().rev() {
            let sc = step_coefficients(*t, *prev, sampler.eta, sched);
            for (i, &s) in weights.subsets().iter().enumerate() {
                let d = eps_v[view_index(s)].lincomb(1.0, &eps_v[uncond], -1.0);
                grad[i] += sc.b * g.dot(&d);
            }
            // d eps_v / d x = (I - alpha J_v) / sigma, and the coefficients sum to one
            let (alpha, sigma) = (sched.signal(*t), sched.sigma(*t));
            let mut jt = Tensor::zeros(g.channels(), g.height(), g.width());
            for &(v, c) in &coeffs {
                if c != 0.0 {
                    jt.axpy(c, &den.predict_x0_vjp(x_t, *t, v, &g)?);
                }
            }
            let eps_vjp = g.lincomb(1.0 / sigma, &jt, -alpha / sigma);
            g = g.lincomb(sc.a, &eps_vjp, sc.b);
        }
    }
    let nb = batch.len() as f64;
    let w = weights.weights();
    let dg = decay_gradient(w, config.alpha, config.beta);
    let grad = grad.iter().zip(dg).map(|(a, d)| a / nb + d).collect();
    Ok((data_loss / nb + decay(w, config.alpha, config.beta), grad))
}

/// Outcome of one pruning round.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneEvent {
    pub iteration: usize,
    /// Position in the family before removal.
    pub position: usize,
    pub subset: GroupMask,
    pub label: String,
    pub weight: f64,
}

/// Removes the subset of smallest weight (ties to the lowest index) and
/// projects the remaining weights back onto the simplex. At or below the
/// budget this is a no-op.
pub fn prune_least_impactful(weights: &SubsetWeights, raw: &[f64], budget: usize) -> Result<(SubsetWeights, Option<(usize, GroupMask, f64)>)> {
    if raw.len() != weights.len() {
        return Err(Error::invalid("raw weight vector does not match the subsets"));
    }
    let total = weights.total();
    if weights.len() <= budget {
        log::warn!("pruning requested with {} subsets at budget {budget}; skipped", weights.len());
        return Ok((SubsetWeights::new(weights.family().clone(), project_simplex(raw, total)?, total)?, None));
    }
    let mut imin = 0;
    for i in 1..raw.len() {
        if raw[i] < raw[imin] {
            imin = i;
        }
    }
    let (family, rest) = weights.remove(imin);
    let projected = project_simplex(&rest, total)?;
    Ok((
        SubsetWeights::new(family, projected, total)?,
        Some((imin, weights.subsets()[imin], raw[imin])),
    ))
}

/// Per-iteration record of a selection run.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub universe: Vec<String>,
    /// Every candidate subset, in initial order.
    pub candidates: Vec<GroupMask>,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Loss at the weights the gradient was taken at.
    pub loss: f64,
    /// Weights after the update, keyed by candidate position; `None` once pruned.
    pub weights: Vec<Option<f64>>,
    pub pruned: Option<PruneEvent>,
}

impl SelectionTrace {
    pub fn prune_events(&self) -> Vec<&PruneEvent> {
        self.rows.iter().filter_map(|r| r.pruned.as_ref()).collect()
    }

    /// Comma-separated table with one row per iteration.
    pub fn to_delimited(&self) -> String {
        let k = self.universe.len();
        let mut out = String::from("iteration,loss,pruned");
        for &c in &self.candidates {
            write!(out, ",w_{}", mask_string(c, k)).expect("write to string");
        }
        out.push('\n');
        for r in &self.rows {
            let pruned = r.pruned.as_ref().map(|p| mask_string(p.subset, k)).unwrap_or_default();
            write!(out, "{},{:.17e},{}", r.iteration, r.loss, pruned).expect("write to string");
            for w in &r.weights {
                match w {
                    Some(v) => write!(out, ",{v:.17e}"),
                    None => write!(out, ","),
                }
                .expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Algorithm of record: start from uniform weights `W / n_p`, then for
/// `i = 1..=N` take a gradient step, prune the smallest weight every
/// `ceil(N / (n_p - m + 1))` iterations while above budget, and project
/// back onto the W-simplex.
pub fn run_selection(
    items: &[SelectionItem<'_>],
    universe: Vec<String>,
    config: &SelectionConfig,
    sched: &NoiseSchedule,
) -> Result<(SubsetWeights, SelectionTrace)> {
    if items.is_empty() {
        return Err(Error::invalid("selection dataset is empty"));
    }
    let family = SubsetFamily::enumerate(universe.clone(), config.max_omitted)?;
    let n_p = family.len();
    config.validate(n_p, sched)?;
    let candidates = family.subsets().to_vec();
    let period = config.prune_period(n_p);
    let mut weights = SubsetWeights::uniform(family, config.total)?;
    let mut rows = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let iter_seed = seed::derive(config.seed, it as u64);
        let picks = index::sample(&mut seed::rng_for(iter_seed, u64::MAX), items.len(), config.batch.min(items.len()));
        let mut picked: Vec<usize> = picks.into_vec();
        picked.sort_unstable();
        let batch: Vec<(usize, &SelectionItem<'_>)> = picked.iter().map(|&i| (i, &items[i])).collect();
        let (loss, grad) = match config.gradient_mode {
            GradientMode::FiniteDifference => finite_difference_gradient(&weights, &batch, config, sched, iter_seed)?,
            GradientMode::Analytic => analytic_gradient(&weights, &batch, config, sched, iter_seed)?,
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("selection diverged at iteration {it}")));
        }
        let raw: Vec<f64> = weights
            .weights()
            .iter()
            .zip(&grad)
            .map(|(w, g)| w - config.step_size * g)
            .collect();
        let mut pruned = None;
        if it % period == 0 && weights.len() > config.budget {
            let labels = weights.family().clone();
            let (next, event) = prune_least_impactful(&weights, &raw, config.budget)?;
            if let Some((position, subset, w)) = event {
                pruned = Some(PruneEvent {
                    iteration: it,
                    position,
                    subset,
                    label: labels.label(position),
                    weight: w,
                });
            }
            weights = next;
        } else {
            weights = SubsetWeights::new(weights.family().clone(), project_simplex(&raw, config.total)?, config.total)?;
        }
        let snapshot = candidates
            .iter()
            .map(|c| {
                weights
                    .subsets()
                    .iter()
                    .position(|s| s == c)
                    .map(|i| weights.weights()[i])
            })
            .collect();
        rows.push(TraceRow {
            iteration: it,
            loss,
            weights: snapshot,
            pruned,
        });
    }
    Ok((
        weights,
        SelectionTrace {
            universe,
            candidates,
            rows,
        },
    ))
}
