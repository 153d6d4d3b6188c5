//! Training losses and their gradients with respect to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Stat;
use crate::tensor::Tensor;

/// Sign with `sign(0) = 0`, the subgradient used for absolute values.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pair(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    pred.ensure_same_shape(target, what)
}

/// Mean absolute error over all cells and channels.
pub fn l1_denoise_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(l1_denoise_loss_grad(pred, target)?.0)
}

pub fn l1_denoise_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(pred, target, "l1 loss")?;
    let n = pred.len() as f64;
    let r = pred.lincomb(1.0, target, -1.0);
    let value = r.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    let grad = r.map(|v| sign(v) / n);
    Ok((value, grad))
}

/// One level of the orthonormal 2-D Haar transform.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarLevel {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

pub fn haar_analysis(x: &Tensor) -> Result<HaarLevel> {
    let (c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("Haar analysis needs even dimensions, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(c, h2, w2));
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let a = x[(ch, 2 * y, 2 * xx)];
                let b = x[(ch, 2 * y, 2 * xx + 1)];
                let cc = x[(ch, 2 * y + 1, 2 * xx)];
                let d = x[(ch, 2 * y + 1, 2 * xx + 1)];
                let i = ch * h2 * w2 + y * w2 + xx;
                out[0].data_mut()[i] = 0.5 * (a + b + cc + d);
                out[1].data_mut()[i] = 0.5 * (a - b + cc - d);
                out[2].data_mut()[i] = 0.5 * (a + b - cc - d);
                out[3].data_mut()[i] = 0.5 * (a - b - cc + d);
            }
        }
    }
    let [ll, lh, hl, hh] = out;
    Ok(HaarLevel { ll, lh, hl, hh })
}

/// Inverse (and adjoint) of [`haar_analysis`].
pub fn haar_synthesis(level: &HaarLevel) -> Result<Tensor> {
    let HaarLevel { ll, lh, hl, hh } = level;
    for t in [lh, hl, hh] {
        ll.ensure_same_shape(t, "Haar synthesis")?;
    }
    let (c, h2, w2) = ll.shape();
    let mut x = Tensor::zeros(c, 2 * h2, 2 * w2);
    let (h, w) = (2 * h2, 2 * w2);
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = ch * h2 * w2 + y * w2 + xx;
                let (s, p, q, r) = (ll.data()[i], lh.data()[i], hl.data()[i], hh.data()[i]);
                let base = ch * h * w;
                let d = x.data_mut();
                d[base + 2 * y * w + 2 * xx] = 0.5 * (s + p + q + r);
                d[base + 2 * y * w + 2 * xx + 1] = 0.5 * (s - p + q - r);
                d[base + (2 * y + 1) * w + 2 * xx] = 0.5 * (s + p - q - r);
                d[base + (2 * y + 1) * w + 2 * xx + 1] = 0.5 * (s - p - q + r);
            }
        }
    }
    Ok(x)
}

/// Multi-level decomposition: detail levels finest first, then the
/// coarsest low-low band.
pub fn haar_decompose(x: &Tensor, levels: usize) -> Result<(Vec<HaarLevel>, Tensor)> {
    let mut out = Vec::with_capacity(levels);
    let mut ll = x.clone();
    for _ in 0..levels {
        let lv = haar_analysis(&ll)?;
        ll = lv.ll.clone();
        out.push(lv);
    }
    Ok((out, ll))
}

pub fn haar_reconstruct(levels: &[HaarLevel], coarse: &Tensor) -> Result<Tensor> {
    let mut ll = coarse.clone();
    for lv in levels.iter().rev() {
        ll = haar_synthesis(&HaarLevel { ll, ..lv.clone() })?;
    }
    Ok(ll)
}

/// Squared distance between the detail bands (LH, HL, HH) of two-level Haar
/// decompositions; the coarse band is ignored.
pub fn dwt_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(dwt_loss_grad(pred, target)?.0)
}

pub fn dwt_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(pred, target, "wavelet loss")?;
    let (_, h, w) = pred.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(format!("wavelet loss needs dimensions divisible by 4, got {h}x{w}")));
    }
    let r = pred.lincomb(1.0, target, -1.0);
    let (levels, coarse) = haar_decompose(&r, 2)?;
    let value: f64 = levels
        .iter()
        .map(|l| l.lh.dot(&l.lh) + l.hl.dot(&l.hl) + l.hh.dot(&l.hh))
        .sum();
    // the transform is orthonormal, so the gradient is twice the residual
    // with its coarse band removed
    let zero = Tensor::zeros(coarse.channels(), coarse.height(), coarse.width());
    let grad = haar_reconstruct(&levels, &zero)?.scaled(2.0);
    Ok((value, grad))
}

/// Image gradient along one axis: central differences inside, one-sided at
/// the two ends.
fn axis_gradient(plane: &[f64], h: usize, w: usize, along_x: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let (n, lines) = if along_x { (w, h) } else { (h, w) };
    for l in 0..lines {
        let idx = |i: usize| if along_x { l * w + i } else { i * w + l };
        for i in 0..n {
            out[idx(i)] = if i == 0 {
                plane[idx(1)] - plane[idx(0)]
            } else if i == n - 1 {
                plane[idx(n - 1)] - plane[idx(n - 2)]
            } else {
                0.5 * (plane[idx(i + 1)] - plane[idx(i - 1)])
            };
        }
    }
    out
}

fn axis_gradient_adjoint(g: &[f64], h: usize, w: usize, along_x: bool, out: &mut [f64]) {
    let (n, lines) = if along_x { (w, h) } else { (h, w) };
    for l in 0..lines {
        let idx = |i: usize| if along_x { l * w + i } else { i * w + l };
        for i in 0..n {
            let gi = g[idx(i)];
            if i == 0 {
                out[idx(1)] += gi;
                out[idx(0)] -= gi;
            } else if i == n - 1 {
                out[idx(n - 1)] += gi;
                out[idx(n - 2)] -= gi;
            } else {
                out[idx(i + 1)] += 0.5 * gi;
                out[idx(i - 1)] -= 0.5 * gi;
            }
        }
    }
}

/// `du/dx + dv/dy` of a two-channel flow, with `x` along columns and `y`
/// along rows, unit grid spacing.
pub fn divergence(uv: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = uv.shape();
    if c != 2 {
        return Err(Error::dim(format!("flow needs 2 channels, got {c}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::dim("divergence needs at least 2x2 cells"));
    }
    let mut d = axis_gradient(uv.channel(0), h, w, true);
    add_assign(&mut d, &axis_gradient(uv.channel(1), h, w, false));
    Ok(d)
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Squared distance between the divergences of two flows.
pub fn divergence_loss(pred_uv: &Tensor, true_uv: &Tensor) -> Result<f64> {
    Ok(divergence_loss_grad(pred_uv, true_uv)?.0)
}

pub fn divergence_loss_grad(pred_uv: &Tensor, true_uv: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(pred_uv, true_uv, "divergence loss")?;
    let r = pred_uv.lincomb(1.0, true_uv, -1.0);
    let d = divergence(&r)?;
    let value = d.iter().map(|v| v * v).sum();
    let (_, h, w) = r.shape();
    let g2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
    let mut grad = Tensor::zeros(2, h, w);
    axis_gradient_adjoint(&g2, h, w, true, grad.channel_mut(0));
    axis_gradient_adjoint(&g2, h, w, false, grad.channel_mut(1));
    Ok((value, grad))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn clamp_index(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// 3x3 Sobel response of every channel with replicate padding.
pub fn sobel(x: &Tensor, along_x: bool) -> Tensor {
    let k = if along_x { &SOBEL_X } else { &SOBEL_Y };
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for (ky, row) in k.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        if kv != 0.0 {
                            s += kv * x[(ch, clamp_index(y, ky as isize - 1, h), clamp_index(xx, kx as isize - 1, w))];
                        }
                    }
                }
                out.data_mut()[ch * h * w + y * w + xx] = s;
            }
        }
    }
    out
}

fn sobel_adjoint(g: &Tensor, along_x: bool, out: &mut Tensor) {
    let k = if along_x { &SOBEL_X } else { &SOBEL_Y };
    let (c, h, w) = g.shape();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let gi = g[(ch, y, xx)];
                if gi == 0.0 {
                    continue;
                }
                for (ky, row) in k.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        if kv != 0.0 {
                            let sy = clamp_index(y, ky as isize - 1, h);
                            let sx = clamp_index(xx, kx as isize - 1, w);
                            out.data_mut()[ch * h * w + sy * w + sx] += kv * gi;
                        }
                    }
                }
            }
        }
    }
}

/// Summed absolute difference of the x and y Sobel responses.
pub fn sobel_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(sobel_loss_grad(pred, target)?.0)
}

pub fn sobel_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(pred, target, "sobel loss")?;
    let r = pred.lincomb(1.0, target, -1.0);
    let mut value = 0.0;
    let mut grad = Tensor::zeros(r.channels(), r.height(), r.width());
    for along_x in [true, false] {
        let s = sobel(&r, along_x);
        value += s.data().iter().map(|v| v.abs()).sum::<f64>();
        sobel_adjoint(&s.map(sign), along_x, &mut grad);
    }
    Ok((value, grad))
}

/// Physical wind components from a model-space target tensor (standardized
/// speed, sin and cos of the direction the wind blows from).
pub fn flow_components(t: &Tensor, speed: Stat) -> Result<Tensor> {
    if t.channels() < 3 {
        return Err(Error::dim("flow needs speed, sin and cos channels"));
    }
    let (h, w) = (t.height(), t.width());
    let mut uv = Tensor::zeros(2, h, w);
    for i in 0..h * w {
        let s = t.channel(0)[i] * speed.std + speed.mean;
        uv.data_mut()[i] = -s * t.channel(1)[i];
        uv.data_mut()[h * w + i] = -s * t.channel(2)[i];
    }
    Ok(uv)
}

fn flow_components_backward(t: &Tensor, speed: Stat, duv: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let mut g = Tensor::zeros(c, h, w);
    let n = h * w;
    for i in 0..n {
        let (sn, cs) = (t.channel(1)[i], t.channel(2)[i]);
        let s = t.channel(0)[i] * speed.std + speed.mean;
        let (du, dv) = (duv.data()[i], duv.data()[n + i]);
        let d = g.data_mut();
        d[i] = -speed.std * (sn * du + cs * dv);
        d[n + i] = -s * du;
        d[2 * n + i] = -s * dv;
    }
    g
}

/// Weights of the auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dwt: f64,
    pub divergence: f64,
    pub sobel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dwt: 1e-3,
            divergence: 1e-3,
            sobel: 1e-3,
        }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights {
        dwt: 0.0,
        divergence: 0.0,
        sobel: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dwt", self.dwt), ("divergence", self.divergence), ("sobel", self.sobel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dwt: f64,
    pub divergence: f64,
    pub sobel: f64,
    pub total: f64,
}

/// `L1 + dwt * DWT + divergence * DIV + sobel * SOBEL`, with the divergence
/// term evaluated on physical (u, v) reconstructed from the speed and
/// direction channels. Returns the gradient with respect to `pred`.
pub fn total_loss_grad(pred: &Tensor, target: &Tensor, weights: &LossWeights, speed: Stat) -> Result<(LossBreakdown, Tensor)> {
    let (l1, mut grad) = l1_denoise_loss_grad(pred, target)?;
    let mut out = LossBreakdown {
        l1,
        ..Default::default()
    };
    if weights.dwt != 0.0 {
        let (v, g) = dwt_loss_grad(pred, target)?;
        out.dwt = v;
        grad.axpy(weights.dwt, &g);
    }
    if weights.divergence != 0.0 {
        let (p_uv, t_uv) = (flow_components(pred, speed)?, flow_components(target, speed)?);
        let (v, g) = divergence_loss_grad(&p_uv, &t_uv)?;
        out.divergence = v;
        grad.axpy(weights.divergence, &flow_components_backward(pred, speed, &g));
    }
    if weights.sobel != 0.0 {
        let (v, g) = sobel_loss_grad(pred, target)?;
        out.sobel = v;
        grad.axpy(weights.sobel, &g);
    }
    out.total = out.l1 + weights.dwt * out.dwt + weights.divergence * out.divergence + weights.sobel * out.sobel;
    Ok((out, grad))
}

pub fn total_loss(pred: &Tensor, target: &Tensor, weights: &LossWeights, speed: Stat) -> Result<LossBreakdown> {
    Ok(total_loss_grad(pred, target, weights, speed)?.0)
}
