//! Forward and backward kernels for the layers of the toy segmenter.
//!
//! Parameters live in one flat buffer; each layer only stores the offsets of
//! its slices. Backward functions accumulate into a gradient buffer of the
//! same layout.

use std::ops::Range;

use crate::tensor::{gemm, MatRef, Tensor4};

/// Dense 2-D convolution, `k × k` kernel with zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.k * self.k;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ci * kk + ky * self.k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.k * self.k;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ci * kk + ky * self.k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor4) -> Tensor4 {
        assert_eq!(x.c, self.cin, "conv input channel mismatch");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let mut y = Tensor4::zeros(x.n, self.cout, ho, wo);
        let weight = MatRef::new(&params[self.weight.clone()], self.cout, self.cin * self.k * self.k);
        let bias = &params[self.bias.clone()];
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; self.cin * self.k * self.k * ho * wo]
        };
        for n in 0..x.n {
            let out = y.sample_mut(n);
            for (co, b) in bias.iter().enumerate() {
                out[co * ho * wo..(co + 1) * ho * wo].fill(*b);
            }
            let input = if self.is_pointwise() {
                MatRef::new(x.sample(n), self.cin, ho * wo)
            } else {
                self.im2col(x.sample(n), x.h, x.w, &mut cols);
                MatRef::new(&cols, self.cin * self.k * self.k, ho * wo)
            };
            gemm(1.0, weight, input, 1.0, out);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor4,
        dy: &Tensor4,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor4> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = self.cin * self.k * self.k;
        let weight = MatRef::new(&params[self.weight.clone()], self.cout, rows);
        let mut dx = need_input_grad.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * ho * wo] };
        let mut dcols = if self.is_pointwise() || !need_input_grad {
            Vec::new()
        } else {
            vec![0.0; rows * ho * wo]
        };
        for n in 0..x.n {
            let dout = MatRef::new(dy.sample(n), self.cout, ho * wo);
            {
                let db = &mut grads[self.bias.clone()];
                for (co, g) in db.iter_mut().enumerate() {
                    *g += dy.sample(n)[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                }
            }
            let input = if self.is_pointwise() {
                MatRef::new(x.sample(n), rows, ho * wo)
            } else {
                self.im2col(x.sample(n), x.h, x.w, &mut cols);
                MatRef::new(&cols, rows, ho * wo)
            };
            gemm(1.0, dout, input.t(), 1.0, &mut grads[self.weight.clone()]);
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    gemm(1.0, weight.t(), dout, 1.0, dx.sample_mut(n));
                } else {
                    gemm(1.0, weight.t(), dout, 0.0, &mut dcols);
                    self.col2im(&dcols, x.h, x.w, dx.sample_mut(n));
                }
            }
        }
        dx
    }
}

/// Depthwise 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn forward(&self, params: &[f64], x: &Tensor4) -> Tensor4 {
        let (h, w) = (x.h as isize, x.w as isize);
        let weight = &params[self.weight.clone()];
        let bias = &params[self.bias.clone()];
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for c in 0..x.c {
                let k = &weight[c * 9..c * 9 + 9];
                let src = x.plane(n, c);
                let dst = y.plane_mut(n, c);
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias[c];
                        for ky in 0..3isize {
                            let iy = oy + ky - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3isize {
                                let ix = ox + kx - 1;
                                if ix >= 0 && ix < w {
                                    acc += k[(ky * 3 + kx) as usize] * src[(iy * w + ix) as usize];
                                }
                            }
                        }
                        dst[(oy * w + ox) as usize] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &Tensor4, dy: &Tensor4, grads: &mut [f64]) -> Tensor4 {
        let (h, w) = (x.h as isize, x.w as isize);
        let weight = &params[self.weight.clone()];
        let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut dw = vec![0.0; self.channels * 9];
        let mut db = vec![0.0; self.channels];
        for n in 0..x.n {
            for c in 0..x.c {
                let k = &weight[c * 9..c * 9 + 9];
                let src = x.plane(n, c);
                let g = dy.plane(n, c);
                let dst = dx.plane_mut(n, c);
                for oy in 0..h {
                    for ox in 0..w {
                        let go = g[(oy * w + ox) as usize];
                        db[c] += go;
                        for ky in 0..3isize {
                            let iy = oy + ky - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3isize {
                                let ix = ox + kx - 1;
                                if ix >= 0 && ix < w {
                                    let i = (iy * w + ix) as usize;
                                    let t = (ky * 3 + kx) as usize;
                                    dw[c * 9 + t] += go * src[i];
                                    dst[i] += go * k[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (g, d) in grads[self.weight.clone()].iter_mut().zip(&dw) {
            *g += d;
        }
        for (g, d) in grads[self.bias.clone()].iter_mut().zip(&db) {
            *g += d;
        }
        dx
    }
}

/// Layer normalization over the channel axis at every spatial position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub channels: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct ChannelNormCache {
    normalized: Tensor4,
    rstd: Vec<f64>,
}

impl ChannelNorm {
    pub fn forward(&self, params: &[f64], x: &Tensor4) -> (Tensor4, ChannelNormCache) {
        let gamma = &params[self.gamma.clone()];
        let beta = &params[self.beta.clone()];
        let hw = x.plane_len();
        let c = x.c as f64;
        let mut normalized = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut rstd = vec![0.0; x.n * hw];
        for n in 0..x.n {
            let src = x.sample(n);
            for p in 0..hw {
                let mean = (0..x.c).map(|ch| src[ch * hw + p]).sum::<f64>() / c;
                let var = (0..x.c).map(|ch| (src[ch * hw + p] - mean).powi(2)).sum::<f64>() / c;
                let r = 1.0 / (var + self.eps).sqrt();
                rstd[n * hw + p] = r;
                for ch in 0..x.c {
                    let xhat = (src[ch * hw + p] - mean) * r;
                    let i = n * x.sample_len() + ch * hw + p;
                    normalized.data[i] = xhat;
                    y.data[i] = xhat * gamma[ch] + beta[ch];
                }
            }
        }
        (y, ChannelNormCache { normalized, rstd })
    }

    pub fn backward(&self, params: &[f64], cache: &ChannelNormCache, dy: &Tensor4, grads: &mut [f64]) -> Tensor4 {
        let gamma = &params[self.gamma.clone()];
        let xhat = &cache.normalized;
        let hw = dy.plane_len();
        let c = dy.c as f64;
        let mut dx = Tensor4::zeros(dy.n, dy.c, dy.h, dy.w);
        let mut dgamma = vec![0.0; dy.c];
        let mut dbeta = vec![0.0; dy.c];
        for n in 0..dy.n {
            let base = n * dy.sample_len();
            for p in 0..hw {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for ch in 0..dy.c {
                    let i = base + ch * hw + p;
                    let g = dy.data[i];
                    dgamma[ch] += g * xhat.data[i];
                    dbeta[ch] += g;
                    let d = g * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat.data[i];
                }
                let r = cache.rstd[n * hw + p];
                for ch in 0..dy.c {
                    let i = base + ch * hw + p;
                    let d = dy.data[i] * gamma[ch];
                    dx.data[i] = r / c * (c * d - sum_d - xhat.data[i] * sum_dx);
                }
            }
        }
        for (g, d) in grads[self.gamma.clone()].iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (g, d) in grads[self.beta.clone()].iter_mut().zip(&dbeta) {
            *g += d;
        }
        dx
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Tensor4) -> Tensor4 {
    let data = x
        .data
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_A * (v + GELU_B * v * v * v)).tanh()))
        .collect();
    Tensor4::from_vec(x.n, x.c, x.h, x.w, data)
}

pub fn gelu_backward(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let t = (GELU_A * (v + GELU_B * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    Tensor4::from_vec(x.n, x.c, x.h, x.w, data)
}

/// Source taps of a 1-D bilinear resize with half-pixel centers.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - lo as f64);
    }
    t
}

/// Bilinear resize of every plane to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor4, out_h: usize, out_w: usize) -> Tensor4 {
    if x.h == out_h && x.w == out_w {
        return x.clone();
    }
    let ty = taps(x.h, out_h);
    let tx = taps(x.w, out_w);
    let mut y = Tensor4::zeros(x.n, x.c, out_h, out_w);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for oy in 0..out_h {
                let (r0, r1, fy) = (ty.lo[oy] * x.w, ty.hi[oy] * x.w, ty.frac[oy]);
                for ox in 0..out_w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                    let bottom = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients onto the input grid.
pub fn resize_bilinear_backward(dy: &Tensor4, in_h: usize, in_w: usize) -> Tensor4 {
    if dy.h == in_h && dy.w == in_w {
        return dy.clone();
    }
    let ty = taps(in_h, dy.h);
    let tx = taps(in_w, dy.w);
    let mut dx = Tensor4::zeros(dy.n, dy.c, in_h, in_w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for oy in 0..dy.h {
                let (r0, r1, fy) = (ty.lo[oy] * in_w, ty.hi[oy] * in_w, ty.frac[oy]);
                for ox in 0..dy.w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let v = g[oy * dy.w + ox];
                    dst[r0 + c0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[r0 + c1] += v * (1.0 - fy) * fx;
                    dst[r1 + c0] += v * fy * (1.0 - fx);
                    dst[r1 + c1] += v * fy * fx;
                }
            }
        }
    }
    dx
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor4]) -> Tensor4 {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        let mut offset = 0;
        let dst = out.sample_mut(b);
        for p in parts {
            let src = p.sample(b);
            dst[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    out
}

pub fn split_channels(x: &Tensor4, channels: &[usize]) -> Vec<Tensor4> {
    let mut parts: Vec<Tensor4> = channels.iter().map(|&c| Tensor4::zeros(x.n, c, x.h, x.w)).collect();
    for b in 0..x.n {
        let src = x.sample(b);
        let mut offset = 0;
        for p in parts.iter_mut() {
            let len = p.sample_len();
            p.sample_mut(b).copy_from_slice(&src[offset..offset + len]);
            offset += len;
        }
    }
    parts
}

pub fn add_assign(dst: &mut Tensor4, src: &Tensor4) {
    debug_assert!(dst.same_shape(src));
    for (a, b) in dst.data.iter_mut().zip(&src.data) {
        *a += b;
    }
}
