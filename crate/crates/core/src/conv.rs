//! 2-D convolution.
//!
//! Dense and grouped convolutions are lowered to im2col + GEMM over column
//! chunks; depthwise convolutions use a direct loop. Every output element is
//! accumulated in `f64` and rounded to `f32` exactly once, so results do not
//! depend on chunking or on the number of worker threads.

use rayon::prelude::*;

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};

/// Convolution weights and geometry. `weight` is laid out as
/// (c_out, c_in / groups, k_h, k_w).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Vec<f32>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if groups == 0 || ws.n % groups != 0 {
            return config_err(format!(
                "conv with {} output channels cannot be split into {groups} groups",
                ws.n
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return config_err("conv stride must be >= 1");
        }
        if let Some(b) = &bias {
            if b.len() != ws.n {
                return config_err(format!("conv bias has {} entries, expected {}", b.len(), ws.n));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Square kernel with "same" padding (k / 2) and equal strides.
    pub fn square(weight: Tensor, bias: Option<Vec<f32>>, stride: usize, groups: usize) -> Result<Self> {
        let k = weight.shape().h;
        let kw = weight.shape().w;
        Self::new(weight, bias, (stride, stride), (k / 2, kw / 2), groups)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn param_count(&self) -> usize {
        self.weight.shape().numel() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output spatial size for an `h` x `w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return config_err(format!(
                "conv kernel {kh}x{kw} does not fit a {h}x{w} input with padding {ph}x{pw}"
            ));
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let ws = self.weight.shape();
        if input.c != self.groups * ws.c {
            return config_err(format!(
                "conv2d: input {input} does not match weight {ws} with groups={}",
                self.groups
            ));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape { n: input.n, c: ws.n, h, w })
    }

    fn is_depthwise(&self) -> bool {
        let ws = self.weight.shape();
        ws.c == 1 && ws.n == self.groups
    }
}

/// Target size of one im2col chunk, in f64 elements.
const COL_BUDGET: usize = 1 << 18;

/// Zero-padded 2-D convolution with direct-summation semantics.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input.shape())?;
    if p.is_depthwise() {
        Ok(depthwise(input, p, out_shape))
    } else {
        Ok(gemm_conv(input, p, out_shape))
    }
}

fn depthwise(input: &Tensor, p: &ConvParams, out: Shape) -> Tensor {
    let s = input.shape();
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let plane = out.plane();
    let mut data = vec![0f32; out.numel()];
    data.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, c) = (idx / out.c, idx % out.c);
        let src = input.plane(n, c);
        let k = &p.weight.data()[c * kh * kw..(c + 1) * kh * kw];
        let b = p.bias.as_ref().map_or(0.0, |b| b[c] as f64);
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut acc = b;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        acc += k[ky * kw + kx] as f64 * row[ix as usize] as f64;
                    }
                }
                dst[oy * out.w + ox] = acc as f32;
            }
        }
    });
    Tensor::from_parts(out, data)
}

struct Task {
    n: usize,
    group: usize,
    start: usize,
    len: usize,
}

fn gemm_conv(input: &Tensor, p: &ConvParams, out: Shape) -> Tensor {
    let s = input.shape();
    let ws = p.weight.shape();
    let (kh, kw) = p.kernel();
    let ci_g = ws.c;
    let co_g = ws.n / p.groups;
    let k_len = ci_g * kh * kw;
    let pixels = out.plane();
    let chunk = (COL_BUDGET / k_len).clamp(256, pixels.max(256)).min(pixels);

    let weights: Vec<f64> = p.weight.data().iter().map(|&v| v as f64).collect();
    let mut tasks = Vec::new();
    for n in 0..s.n {
        for group in 0..p.groups {
            let mut start = 0;
            while start < pixels {
                let len = chunk.min(pixels - start);
                tasks.push(Task { n, group, start, len });
                start += len;
            }
        }
    }

    let results: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|t| {
            let col = im2col(input, p, out, t, ci_g);
            let mut acc = vec![0f64; co_g * t.len];
            let a = &weights[t.group * co_g * k_len..];
            // SAFETY: a is co_g x k_len, col is k_len x len, acc is co_g x len,
            // all row-major and fully allocated.
            unsafe {
                matrixmultiply::dgemm(
                    co_g,
                    k_len,
                    t.len,
                    1.0,
                    a.as_ptr(),
                    k_len as isize,
                    1,
                    col.as_ptr(),
                    t.len as isize,
                    1,
                    0.0,
                    acc.as_mut_ptr(),
                    t.len as isize,
                    1,
                );
            }
            acc
        })
        .collect();

    let mut data = vec![0f32; out.numel()];
    for (t, acc) in tasks.iter().zip(results) {
        for o in 0..co_g {
            let oc = t.group * co_g + o;
            let b = p.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
            let base = (t.n * out.c + oc) * pixels + t.start;
            let dst = &mut data[base..base + t.len];
            for (d, v) in dst.iter_mut().zip(&acc[o * t.len..(o + 1) * t.len]) {
                *d = (v + b) as f32;
            }
        }
    }
    Tensor::from_parts(out, data)
}

fn im2col(input: &Tensor, p: &ConvParams, out: Shape, t: &Task, ci_g: usize) -> Vec<f64> {
    let s = input.shape();
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let mut col = vec![0f64; ci_g * kh * kw * t.len];
    let pointwise = kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0;
    for ci in 0..ci_g {
        let src = input.plane(t.n, t.group * ci_g + ci);
        if pointwise {
            let dst = &mut col[ci * t.len..(ci + 1) * t.len];
            for (d, v) in dst.iter_mut().zip(&src[t.start..t.start + t.len]) {
                *d = *v as f64;
            }
            continue;
        }
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * t.len..(row + 1) * t.len];
                let (mut oy, mut ox) = (t.start / out.w, t.start % out.w);
                for d in dst.iter_mut() {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        *d = src[iy as usize * s.w + ix as usize] as f64;
                    }
                    ox += 1;
                    if ox == out.w {
                        ox = 0;
                        oy += 1;
                    }
                }
            }
        }
    }
    col
}
