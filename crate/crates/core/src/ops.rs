//! Elementwise, layout and pooling primitives.

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};

/// Inference-mode batch normalization statistics for `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return config_err("batch norm parameter vectors differ in length");
        }
        if eps < 0.0 || running_var.iter().any(|v| !(*v >= 0.0)) {
            return config_err("batch norm needs running_var >= 0 and eps >= 0");
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    /// gamma = 1, beta = 0, mean = 0, var = 1 with the given eps.
    pub fn identity(c: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `gamma / sqrt(var + eps)`, computed in f64.
    pub fn scale(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g as f64 / (v as f64 + self.eps as f64).sqrt())
            .collect()
    }
}

pub fn batch_norm_infer(input: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
    let s = input.shape();
    if s.c != bn.channels() {
        return config_err(format!(
            "batch norm over {} channels applied to input {s}",
            bn.channels()
        ));
    }
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b, m) = (bn.gamma[c], bn.beta[c], bn.running_mean[c]);
            let d = (bn.running_var[c] + bn.eps).sqrt();
            out.extend(input.plane(n, c).iter().map(|&x| g * (x - m) / d + b));
        }
    }
    Ok(Tensor::from_parts(s, out))
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn silu(input: &Tensor) -> Tensor {
    input.map(silu_scalar)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Space-to-channel rearrangement (c, 2h, 2w) -> (4c, h, w). Output channel
/// `block * c + ch` holds the sub-grid of input channel `ch` selected by
/// `block`: 0 = (even row, even col), 1 = (odd row, even col),
/// 2 = (even row, odd col), 3 = (odd row, odd col).
pub fn focus_slice(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return config_err(format!("focus slice needs even spatial dims, got {s}"));
    }
    let out = Shape {
        n: s.n,
        c: 4 * s.c,
        h: s.h / 2,
        w: s.w / 2,
    };
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for &(dy, dx) in &OFFSETS {
            for c in 0..s.c {
                let src = input.plane(n, c);
                for y in 0..out.h {
                    let row = &src[(2 * y + dy) * s.w..];
                    data.extend((0..out.w).map(|x| row[2 * x + dx]));
                }
            }
        }
    }
    Ok(Tensor::from_parts(out, data))
}

pub fn upsample_nearest_2x(input: &Tensor) -> Tensor {
    let s = input.shape();
    let out = Shape {
        h: 2 * s.h,
        w: 2 * s.w,
        ..s
    };
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..out.h {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                data.extend((0..out.w).map(|x| row[x / 2]));
            }
        }
    }
    Tensor::from_parts(out, data)
}

/// Averages consecutive groups of `c / c_out` channels.
pub fn channel_group_mean(input: &Tensor, c_out: usize) -> Result<Tensor> {
    let s = input.shape();
    if c_out == 0 || s.c % c_out != 0 {
        return config_err(format!(
            "cannot average {} channels down to {c_out}",
            s.c
        ));
    }
    let g = s.c / c_out;
    if g == 1 {
        return Ok(input.clone());
    }
    let out = s.with_c(c_out);
    let plane = s.plane();
    let mut data = Vec::with_capacity(out.numel());
    let mut acc = vec![0f64; plane];
    for n in 0..s.n {
        for j in 0..c_out {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in j * g..(j + 1) * g {
                for (a, v) in acc.iter_mut().zip(input.plane(n, c)) {
                    *a += *v as f64;
                }
            }
            data.extend(acc.iter().map(|a| (a / g as f64) as f32));
        }
    }
    Ok(Tensor::from_parts(out, data))
}

/// Transpose shuffle: input channel `j` lands at output channel
/// `(j mod g) * (c / g) + j / g`.
pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return config_err(format!("cannot shuffle {} channels in {groups} groups", s.c));
    }
    let per = s.c / groups;
    let mut src_of = vec![0; s.c];
    for j in 0..s.c {
        src_of[(j % groups) * per + j / groups] = j;
    }
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for &j in &src_of {
            data.extend_from_slice(input.plane(n, j));
        }
    }
    Ok(Tensor::from_parts(s, data))
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return config_err("concat of zero tensors");
    };
    let s0 = first.shape();
    let mut c = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return config_err(format!("cannot concatenate {s0} with {s}"));
        }
        c += s.c;
    }
    let out = s0.with_c(c);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s0.n {
        for t in inputs {
            data.extend_from_slice(t.item(n));
        }
    }
    Ok(Tensor::from_parts(out, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return config_err(format!("cannot add {} and {}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

/// Max pooling; padded positions never win.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let s = input.shape();
    if kernel == 0 || stride == 0 || s.h + 2 * pad < kernel || s.w + 2 * pad < kernel || pad >= kernel {
        return config_err(format!(
            "max pool k={kernel} s={stride} p={pad} does not fit input {s}"
        ));
    }
    let out = Shape {
        h: (s.h + 2 * pad - kernel) / stride + 1,
        w: (s.w + 2 * pad - kernel) / stride + 1,
        ..s
    };
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for oy in 0..out.h {
                let y0 = (oy * stride).saturating_sub(pad);
                let y1 = (oy * stride + kernel - pad).min(s.h);
                for ox in 0..out.w {
                    let x0 = (ox * stride).saturating_sub(pad);
                    let x1 = (ox * stride + kernel - pad).min(s.w);
                    let mut m = f32::NEG_INFINITY;
                    for y in y0..y1 {
                        for &v in &src[y * s.w + x0..y * s.w + x1] {
                            m = m.max(v);
                        }
                    }
                    data.push(m);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out, data))
}

/// Mean over each (h, w) plane, giving an (n, c, 1, 1) tensor.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let s = input.shape();
    let mut data = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = input.plane(n, c).iter().map(|&v| v as f64).sum();
            data.push((sum / s.plane() as f64) as f32);
        }
    }
    Tensor::from_parts(Shape { h: 1, w: 1, ..s }, data)
}

/// Softmax across the channel axis at every (n, y, x).
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let mut data = vec![0f32; s.numel()];
    for n in 0..s.n {
        let item = input.item(n);
        let dst = &mut data[n * s.c * plane..(n + 1) * s.c * plane];
        for p in 0..plane {
            let max = (0..s.c).map(|c| item[c * plane + p]).fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = (0..s.c)
                .map(|c| ((item[c * plane + p] - max) as f64).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                dst[c * plane + p] = (e / total) as f32;
            }
        }
    }
    Tensor::from_parts(s, data)
}

/// `sum_k weights[:, k] * inputs[k]`. `weights` has one channel per input
/// and either the inputs' spatial size or 1x1 (broadcast).
pub fn weighted_sum(weights: &Tensor, inputs: &[&Tensor]) -> Result<Tensor> {
    let ws = weights.shape();
    let Some(first) = inputs.first() else {
        return config_err("weighted sum of zero tensors");
    };
    let s = first.shape();
    if ws.c != inputs.len() || ws.n != s.n {
        return config_err(format!(
            "weights {ws} do not match {} inputs of shape {s}",
            inputs.len()
        ));
    }
    let broadcast = ws.h == 1 && ws.w == 1;
    if !broadcast && (ws.h != s.h || ws.w != s.w) {
        return config_err(format!("weights {ws} are neither 1x1 nor the size of {s}"));
    }
    if inputs.iter().any(|t| t.shape() != s) {
        return config_err("weighted sum inputs differ in shape");
    }
    let plane = s.plane();
    let mut data = vec![0f32; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let dst = &mut data[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            for (k, t) in inputs.iter().enumerate() {
                let src = t.plane(n, c);
                let wp = weights.plane(n, k);
                for (p, d) in dst.iter_mut().enumerate() {
                    let w = if broadcast { wp[0] } else { wp[p] };
                    *d += w * src[p];
                }
            }
        }
    }
    Ok(Tensor::from_parts(s, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, c: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::from_dims(n, c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn batch_norm_identity_and_affine() {
        let x = t(1, 2, 1, 2, &[1.0, -2.0, 3.5, 0.25]);
        let id = BatchNormParams::new(vec![1.0; 2], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        assert_eq!(batch_norm_infer(&x, &id).unwrap(), x);

        let ones = Tensor::full(x.shape(), 1.0);
        let affine = BatchNormParams::new(vec![2.0; 2], vec![3.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        assert!(batch_norm_infer(&ones, &affine).unwrap().data().iter().all(|&v| v == 5.0));
        assert!(batch_norm_infer(&t(1, 3, 1, 1, &[0.0; 3]), &id).is_err());
    }

    #[test]
    fn batch_norm_rejects_negative_variance() {
        assert!(BatchNormParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 1e-3).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!(silu_scalar(-30.0).abs() < 1e-9);
        assert!((silu_scalar(1.0) - 0.731_058_6).abs() < 1e-6);
        assert!(silu_scalar(-200.0).is_finite());
    }

    #[test]
    fn focus_smallest_case() {
        let y = focus_slice(&t(1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.shape().dims(), [1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(focus_slice(&t(1, 1, 3, 2, &[0.0; 6])).is_err());
    }

    #[test]
    fn upsample_definition() {
        let y = upsample_nearest_2x(&t(1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0]));
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
        let v = upsample_nearest_2x(&t(1, 1, 1, 1, &[7.5]));
        assert_eq!(v.data(), &[7.5; 4]);
    }

    #[test]
    fn group_mean_cases() {
        let x = t(1, 4, 1, 1, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(channel_group_mean(&x, 4).unwrap(), x);
        assert_eq!(channel_group_mean(&x, 2).unwrap().data(), &[2.0, 6.0]);
        assert!(channel_group_mean(&x, 3).is_err());
    }

    #[test]
    fn shuffle_cases() {
        let x = t(1, 4, 1, 1, &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(channel_shuffle(&x, 2).unwrap().data(), &[10.0, 12.0, 11.0, 13.0]);
        assert!(channel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn max_pool_same_padding() {
        let x = t(1, 1, 2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let y = max_pool2d(&x, 3, 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
        let z = max_pool2d(&t(1, 1, 4, 4, &(0..16).map(|v| v as f32).collect::<Vec<_>>()), 3, 2, 1).unwrap();
        assert_eq!(z.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_weighted_sum_broadcasts() {
        let logits = t(1, 3, 1, 2, &[0.0, 40.0, 0.0, -40.0, 0.0, -40.0]);
        let w = softmax_channels(&logits);
        for p in 0..2 {
            let s: f32 = (0..3).map(|c| w.at(0, c, 0, p)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let a = Tensor::full(Shape::new(1, 2, 1, 2).unwrap(), 1.0);
        let b = Tensor::full(a.shape(), 3.0);
        let half = t(1, 2, 1, 1, &[0.5, 0.5]);
        let y = weighted_sum(&half, &[&a, &b]).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_and_add_check_shapes() {
        let a = t(1, 1, 1, 2, &[1.0, 2.0]);
        let b = t(1, 2, 1, 2, &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(add(&a, &b).is_err());
        assert!(concat_channels(&[&a, &t(1, 1, 2, 1, &[0.0, 0.0])]).is_err());
    }
}
