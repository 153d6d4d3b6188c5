use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvSlot, DenseSlot};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Shape of the encoder-decoder: an input convolution, residual blocks at
/// full, half and quarter resolution on the way down, one more at half
/// resolution on the way up, and an output convolution. Skip connections
/// add encoder activations to the upsampled decoder path; the timestep
/// embedding enters every block as a per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub target_channels: usize,
    pub cond_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Architecture {
    pub fn new(target_channels: usize, cond_channels: usize) -> Self {
        Self {
            target_channels,
            cond_channels,
            width: 32,
            time_dim: 32,
            time_hidden: 64,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.target_channels + self.cond_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_channels == 0 || self.width == 0 || self.time_hidden == 0 {
            return Err(Error::invalid("architecture widths must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding size must be even and >= 2"));
        }
        // keeps parameter counts and checkpoint payloads bounded
        if self.width > 1024 || self.time_dim > 1024 || self.time_hidden > 1024 || self.input_channels() > 1024 {
            return Err(Error::invalid("architecture dimensions exceed 1024"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

const BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    conv_a: ConvSlot,
    proj: DenseSlot,
    conv_b: ConvSlot,
}

#[derive(Debug, Clone)]
struct Layout {
    time: DenseSlot,
    input: ConvSlot,
    blocks: [BlockSlots; BLOCKS],
    output: ConvSlot,
    total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut off = 0;
        let mut dense = |nin, nout| {
            let s = DenseSlot { offset: off, nin, nout };
            off += s.len();
            s
        };
        let time = dense(a.time_dim, a.time_hidden);
        let conv = |off: &mut usize, cin, cout| {
            let s = ConvSlot { offset: *off, cin, cout };
            *off += s.len();
            s
        };
        let input = conv(&mut off, a.input_channels(), a.width);
        let blocks = std::array::from_fn(|_| {
            let conv_a = conv(&mut off, a.width, a.width);
            let proj = DenseSlot {
                offset: off,
                nin: a.time_hidden,
                nout: a.width,
            };
            off += proj.len();
            let conv_b = conv(&mut off, a.width, a.width);
            BlockSlots { conv_a, proj, conv_b }
        });
        let output = conv(&mut off, a.width, a.target_channels);
        Self {
            time,
            input,
            blocks,
            output,
            total: off,
        }
    }
}

struct BlockTape {
    input: Vec<f64>,
    cols_a: Vec<f64>,
    pre: Vec<f64>,
    cols_b: Vec<f64>,
}

/// Intermediate activations of one forward pass.
pub struct Tape {
    h: usize,
    w: usize,
    embedding: Vec<f64>,
    time_pre: Vec<f64>,
    hidden: Vec<f64>,
    cols_in: Vec<f64>,
    blocks: Vec<BlockTape>,
    out_pre: Vec<f64>,
    cols_out: Vec<f64>,
}

/// The denoising network with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Fresh model: He-normal input and first block convolutions, small
    /// second convolutions so each block starts close to the identity.
    pub fn init(arch: Architecture, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng(init_seed);
        let mut fill = |off: usize, len: usize, fan_in: usize, gain: f64| {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            for p in &mut params[off..off + len] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(layout.time.offset, layout.time.nout * layout.time.nin, layout.time.nin, 1.0);
        fill(layout.input.offset, layout.input.weight_len(), layout.input.cin * 9, 1.0);
        for b in &layout.blocks {
            fill(b.conv_a.offset, b.conv_a.weight_len(), b.conv_a.cin * 9, 1.0);
            fill(b.proj.offset, b.proj.nout * b.proj.nin, b.proj.nin, 0.5);
            fill(b.conv_b.offset, b.conv_b.weight_len(), b.conv_b.cin * 9, 0.1);
        }
        fill(layout.output.offset, layout.output.weight_len(), layout.output.cin * 9, 0.1);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        if params.len() != n {
            return Err(Error::dim(format!("architecture needs {n} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.arch.input_channels() {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                self.arch.input_channels(),
                input.channels()
            )));
        }
        if input.height() % 4 != 0 || input.width() % 4 != 0 || input.height() == 0 || input.width() == 0 {
            return Err(Error::dim(format!(
                "spatial size {}x{} must be a positive multiple of 4",
                input.height(),
                input.width()
            )));
        }
        Ok(())
    }

    /// Clean-data prediction from the assembled input (noisy target channels
    /// followed by conditioning channels).
    pub fn forward(&self, input: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.forward_tape(input, t)?.0)
    }

    pub fn forward_tape(&self, input: &Tensor, t: f64) -> Result<(Tensor, Tape)> {
        self.check_input(input)?;
        let layout = Layout::new(&self.arch);
        let p = &self.params;
        let (h, w) = (input.height(), input.width());
        let c = self.arch.width;

        let embedding = ops::timestep_embedding(t, self.arch.time_dim);
        let time_pre = layout.time.forward(p, &embedding);
        let hidden = ops::silu(&time_pre);

        let (h0, cols_in) = layout.input.forward(p, input.data(), h, w);
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut run_block = |i: usize, x: Vec<f64>, hh: usize, ww: usize| -> Vec<f64> {
            let s = &layout.blocks[i];
            let (mut pre, cols_a) = s.conv_a.forward(p, &ops::silu(&x), hh, ww);
            let bias = s.proj.forward(p, &hidden);
            for (ch, b) in bias.iter().enumerate() {
                pre[ch * hh * ww..(ch + 1) * hh * ww].iter_mut().for_each(|v| *v += b);
            }
            let (res, cols_b) = s.conv_b.forward(p, &ops::silu(&pre), hh, ww);
            let mut out = x.clone();
            ops::add_assign(&mut out, &res);
            blocks.push(BlockTape {
                input: x,
                cols_a,
                pre,
                cols_b,
            });
            out
        };
        let s0 = run_block(0, h0, h, w);
        let s1 = run_block(1, ops::avg_pool2(&s0, c, h, w), h / 2, w / 2);
        let mid = run_block(2, ops::avg_pool2(&s1, c, h / 2, w / 2), h / 4, w / 4);
        let mut u1 = ops::upsample2(&mid, c, h / 4, w / 4);
        ops::add_assign(&mut u1, &s1);
        let d1 = run_block(3, u1, h / 2, w / 2);
        let mut out_pre = ops::upsample2(&d1, c, h / 2, w / 2);
        ops::add_assign(&mut out_pre, &s0);
        let (y, cols_out) = layout.output.forward(p, &ops::silu(&out_pre), h, w);
        let out = Tensor::from_vec(self.arch.target_channels, h, w, y)?;
        Ok((
            out,
            Tape {
                h,
                w,
                embedding,
                time_pre,
                hidden,
                cols_in,
                blocks,
                out_pre,
                cols_out,
            },
        ))
    }

    /// Backpropagates `dout` (gradient of a scalar with respect to the
    /// output). Parameter gradients are accumulated into `grad` when given;
    /// the gradient with respect to the full input tensor is returned.
    pub fn backward(&self, tape: &Tape, dout: &Tensor, mut grad: Option<&mut [f64]>) -> Result<Tensor> {
        let (h, w) = (tape.h, tape.w);
        if dout.shape() != (self.arch.target_channels, h, w) {
            return Err(Error::dim("output gradient does not match the forward pass"));
        }
        if let Some(g) = grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::dim("gradient buffer does not match the parameter count"));
            }
        }
        let layout = Layout::new(&self.arch);
        let p = &self.params;
        let c = self.arch.width;
        let mut dhidden = vec![0.0; self.arch.time_hidden];

        let d_out_pre = layout.output.backward(p, &tape.cols_out, dout.data(), h, w, grad.as_deref_mut());
        let d_out_pre = ops::silu_backward(&tape.out_pre, &d_out_pre);
        // out_pre = up(d1) + s0
        let mut ds0 = d_out_pre.clone();
        let dd1 = ops::upsample2_backward(&d_out_pre, c, h / 2, w / 2);

        let mut block_back = |i: usize, dout: Vec<f64>, hh: usize, ww: usize, grad: &mut Option<&mut [f64]>| -> Vec<f64> {
            let s = &layout.blocks[i];
            let bt = &tape.blocks[i];
            let da2 = s.conv_b.backward(p, &bt.cols_b, &dout, hh, ww, grad.as_deref_mut());
            let dpre = ops::silu_backward(&bt.pre, &da2);
            let dbias: Vec<f64> = (0..c).map(|ch| dpre[ch * hh * ww..(ch + 1) * hh * ww].iter().sum()).collect();
            let dh = s.proj.backward(p, &tape.hidden, &dbias, grad.as_deref_mut());
            ops::add_assign(&mut dhidden, &dh);
            let da1 = s.conv_a.backward(p, &bt.cols_a, &dpre, hh, ww, grad.as_deref_mut());
            let mut dx = dout;
            ops::add_assign(&mut dx, &ops::silu_backward(&bt.input, &da1));
            dx
        };
        let du1 = block_back(3, dd1, h / 2, w / 2, &mut grad);
        // u1 = up(mid) + s1
        let mut ds1 = du1.clone();
        let dmid = ops::upsample2_backward(&du1, c, h / 4, w / 4);
        let dp2 = block_back(2, dmid, h / 4, w / 4, &mut grad);
        ops::add_assign(&mut ds1, &ops::avg_pool2_backward(&dp2, c, h / 2, w / 2));
        let dp1 = block_back(1, ds1, h / 2, w / 2, &mut grad);
        ops::add_assign(&mut ds0, &ops::avg_pool2_backward(&dp1, c, h, w));
        let dh0 = block_back(0, ds0, h, w, &mut grad);
        let dinput = layout.input.backward(p, &tape.cols_in, &dh0, h, w, grad.as_deref_mut());

        let dtime_pre = ops::silu_backward(&tape.time_pre, &dhidden);
        layout.time.backward(p, &tape.embedding, &dtime_pre, grad.as_deref_mut());
        Tensor::from_vec(self.arch.input_channels(), h, w, dinput)
    }
}
