//! Forward and backward kernels for the network: 3x3 convolutions as
//! im2col + GEMM, dense layers, SiLU, 2x average pooling and 2x nearest
//! upsampling. Activations are `(channels, height, width)` row-major.

/// `c = beta c + op(a) op(b)` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm lhs");
    assert_eq!(b.len(), k * n, "gemm rhs");
    assert_eq!(c.len(), m * n, "gemm out");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted buffer extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix of shape `(cin * 9) x (h * w)` with zero padding.
pub(crate) fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let dst = &mut plane[(sy - 1) * w..sy * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Offsets of one 3x3 convolution inside the flat parameter vector:
/// weights `cout x (cin * 9)` then `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvSlot {
    pub offset: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvSlot {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    /// Returns the output and the patch matrix needed by the backward pass.
    pub fn forward(&self, params: &[f64], x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let hw = h * w;
        let cols = im2col(x, self.cin, h, w);
        let wt = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.len()];
        let mut out = vec![0.0; self.cout * hw];
        for (c, b) in bias.iter().enumerate() {
            out[c * hw..(c + 1) * hw].fill(*b);
        }
        gemm(self.cout, self.cin * 9, hw, wt, false, &cols, false, 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates parameter gradients (when `grad` is given) and returns the
    /// input gradient.
    pub fn backward(&self, params: &[f64], cols: &[f64], dout: &[f64], h: usize, w: usize, grad: Option<&mut [f64]>) -> Vec<f64> {
        let hw = h * w;
        let k = self.cin * 9;
        if let Some(g) = grad {
            let (gw, gb) = g[self.offset..self.offset + self.len()].split_at_mut(self.weight_len());
            gemm(self.cout, hw, k, dout, false, cols, true, 1.0, gw);
            for (c, b) in gb.iter_mut().enumerate() {
                *b += dout[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        let wt = &params[self.offset..self.offset + self.weight_len()];
        let mut dcols = vec![0.0; k * hw];
        gemm(k, self.cout, hw, wt, true, dout, false, 0.0, &mut dcols);
        col2im(&dcols, self.cin, h, w)
    }
}

/// Offsets of a dense layer: weights `nout x nin` then `nout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DenseSlot {
    pub offset: usize,
    pub nin: usize,
    pub nout: usize,
}

impl DenseSlot {
    pub fn len(&self) -> usize {
        self.nout * (self.nin + 1)
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let wt = &params[self.offset..self.offset + self.nout * self.nin];
        let bias = &params[self.offset + self.nout * self.nin..self.offset + self.len()];
        (0..self.nout)
            .map(|o| bias[o] + wt[o * self.nin..(o + 1) * self.nin].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dout: &[f64], grad: Option<&mut [f64]>) -> Vec<f64> {
        let nw = self.nout * self.nin;
        if let Some(g) = grad {
            let (gw, gb) = g[self.offset..self.offset + self.len()].split_at_mut(nw);
            for o in 0..self.nout {
                for i in 0..self.nin {
                    gw[o * self.nin + i] += dout[o] * x[i];
                }
                gb[o] += dout[o];
            }
        }
        let wt = &params[self.offset..self.offset + nw];
        let mut dx = vec![0.0; self.nin];
        for o in 0..self.nout {
            for i in 0..self.nin {
                dx[i] += wt[o * self.nin + i] * dout[o];
            }
        }
        dx
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dout * silu'(x)`
pub(crate) fn silu_backward(x: &[f64], dout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dout)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub(crate) fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * h2 * w2 + y * w2 + xx] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]; `h, w` are the pooled input's dimensions.
pub(crate) fn avg_pool2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] = 0.25 * dout[ch * h2 * w2 + (y / 2) * w2 + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling from `h x w`.
pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[ch * h2 * w2 + y * w2 + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h, w` are the low-resolution dimensions.
pub(crate) fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dout[ch * h2 * w2 + y * w2 + xx];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub(crate) fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}
