//! Execution backends.
//!
//! Every block writes its forward pass once against [`Exec`]. [`Eval`] runs it
//! on real tensors; [`Meter`] runs it on shapes only and tallies
//! multiply-accumulates, elementwise work and the number of runtime operations.

use crate::conv::{conv2d, ConvParams};
use crate::error::{config_err, Result};
use crate::ops::{self, BatchNormParams};
use crate::tensor::{Shape, Tensor};

pub trait Exec {
    type Value: Clone;

    fn conv(&mut self, x: &Self::Value, p: &ConvParams) -> Result<Self::Value>;
    fn batch_norm(&mut self, x: &Self::Value, bn: &BatchNormParams) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn focus(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn group_mean(&mut self, x: &Self::Value, c_out: usize) -> Result<Self::Value>;
    fn shuffle(&mut self, x: &Self::Value, groups: usize) -> Result<Self::Value>;
    fn max_pool(&mut self, x: &Self::Value, k: usize, stride: usize, pad: usize) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softmax_channels(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn weighted_sum(&mut self, w: &Self::Value, xs: &[&Self::Value]) -> Result<Self::Value>;
}

/// Numeric evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Exec for Eval {
    type Value = Tensor;

    fn conv(&mut self, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
        conv2d(x, p)
    }
    fn batch_norm(&mut self, x: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
        ops::batch_norm_infer(x, bn)
    }
    fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::silu(x))
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }
    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::sigmoid(x))
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }
    fn concat(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        ops::concat_channels(xs)
    }
    fn upsample2x(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::upsample_nearest_2x(x))
    }
    fn focus(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::focus_slice(x)
    }
    fn group_mean(&mut self, x: &Tensor, c_out: usize) -> Result<Tensor> {
        ops::channel_group_mean(x, c_out)
    }
    fn shuffle(&mut self, x: &Tensor, groups: usize) -> Result<Tensor> {
        ops::channel_shuffle(x, groups)
    }
    fn max_pool(&mut self, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
        ops::max_pool2d(x, k, stride, pad)
    }
    fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::global_avg_pool(x))
    }
    fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::softmax_channels(x))
    }
    fn weighted_sum(&mut self, w: &Tensor, xs: &[&Tensor]) -> Result<Tensor> {
        ops::weighted_sum(w, xs)
    }
}

/// Shape-only execution that accumulates cost.
///
/// A convolution costs `k_h * k_w * c_in / groups * c_out * h_out * w_out`
/// MACs. Activations, batch norm, additions, pooling and reductions cost one
/// elementwise op per output value (per input value for reductions). Pure
/// data movement (concat, upsample, focus, shuffle) is free but still counts
/// as a runtime operation.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Meter {
    pub macs: u64,
    pub elementwise: u64,
    pub ops: u64,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Floating point operations: two per MAC plus the elementwise work.
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }

    fn tally(&mut self, elementwise: usize) {
        self.ops += 1;
        self.elementwise += elementwise as u64;
    }
}

impl Exec for Meter {
    type Value = Shape;

    fn conv(&mut self, x: &Shape, p: &ConvParams) -> Result<Shape> {
        let out = p.output_shape(*x)?;
        let (kh, kw) = p.kernel();
        self.macs += (kh * kw * p.weight.shape().c * out.numel()) as u64;
        self.ops += 1;
        Ok(out)
    }
    fn batch_norm(&mut self, x: &Shape, bn: &BatchNormParams) -> Result<Shape> {
        if x.c != bn.channels() {
            return config_err(format!("batch norm over {} channels applied to {x}", bn.channels()));
        }
        self.tally(x.numel());
        Ok(*x)
    }
    fn silu(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(x.numel());
        Ok(*x)
    }
    fn relu(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(x.numel());
        Ok(*x)
    }
    fn sigmoid(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(x.numel());
        Ok(*x)
    }
    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        if a != b {
            return config_err(format!("cannot add {a} and {b}"));
        }
        self.tally(a.numel());
        Ok(*a)
    }
    fn concat(&mut self, xs: &[&Shape]) -> Result<Shape> {
        let Some(first) = xs.first() else {
            return config_err("concat of zero tensors");
        };
        let mut c = 0;
        for s in xs {
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return config_err(format!("cannot concatenate {first} with {s}"));
            }
            c += s.c;
        }
        self.tally(0);
        Ok(first.with_c(c))
    }
    fn upsample2x(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(0);
        Ok(Shape { h: 2 * x.h, w: 2 * x.w, ..*x })
    }
    fn focus(&mut self, x: &Shape) -> Result<Shape> {
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return config_err(format!("focus slice needs even spatial dims, got {x}"));
        }
        self.tally(0);
        Ok(Shape { n: x.n, c: 4 * x.c, h: x.h / 2, w: x.w / 2 })
    }
    fn group_mean(&mut self, x: &Shape, c_out: usize) -> Result<Shape> {
        if c_out == 0 || x.c % c_out != 0 {
            return config_err(format!("cannot average {} channels down to {c_out}", x.c));
        }
        if c_out == x.c {
            return Ok(*x);
        }
        self.tally(x.numel());
        Ok(x.with_c(c_out))
    }
    fn shuffle(&mut self, x: &Shape, groups: usize) -> Result<Shape> {
        if groups == 0 || x.c % groups != 0 {
            return config_err(format!("cannot shuffle {} channels in {groups} groups", x.c));
        }
        self.tally(0);
        Ok(*x)
    }
    fn max_pool(&mut self, x: &Shape, k: usize, stride: usize, pad: usize) -> Result<Shape> {
        if k == 0 || stride == 0 || x.h + 2 * pad < k || x.w + 2 * pad < k || pad >= k {
            return config_err(format!("max pool k={k} s={stride} p={pad} does not fit input {x}"));
        }
        let out = Shape {
            h: (x.h + 2 * pad - k) / stride + 1,
            w: (x.w + 2 * pad - k) / stride + 1,
            ..*x
        };
        self.tally(out.numel());
        Ok(out)
    }
    fn global_avg_pool(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(x.numel());
        Ok(Shape { h: 1, w: 1, ..*x })
    }
    fn softmax_channels(&mut self, x: &Shape) -> Result<Shape> {
        self.tally(x.numel());
        Ok(*x)
    }
    fn weighted_sum(&mut self, w: &Shape, xs: &[&Shape]) -> Result<Shape> {
        let Some(first) = xs.first() else {
            return config_err("weighted sum of zero tensors");
        };
        if w.c != xs.len() || xs.iter().any(|s| *s != *first) {
            return config_err(format!("weights {w} do not match {} inputs of shape {first}", xs.len()));
        }
        self.tally(first.numel() * xs.len());
        Ok(**first)
    }
}
