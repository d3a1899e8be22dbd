//! Inference-time graph rewrites: batch-norm folding and RepVGG branch
//! collapse, plus the model-wide pass that applies both.

use crate::conv::ConvParams;
use crate::error::{config_err, Error, Result};
use crate::layers::{RepVggBlockParams, UnitMut, Units};
use crate::model::Detector;
use crate::ops::BatchNormParams;
use crate::tensor::{Shape, Tensor};

/// Folds `bn` into `conv`: `bn(conv(x)) == fold_bn(conv, bn)(x)`.
pub fn fold_bn(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    let c_out = conv.c_out();
    if bn.channels() != c_out {
        return config_err(format!(
            "cannot fold a {}-channel batch norm into a conv with {c_out} outputs",
            bn.channels()
        ));
    }
    let scale = bn.scale();
    let per_out = conv.weight.shape().numel() / c_out;
    let mut weight = conv.weight.data().to_vec();
    for (j, chunk) in weight.chunks_mut(per_out).enumerate() {
        for w in chunk {
            *w = (*w as f64 * scale[j]) as f32;
        }
    }
    let bias = (0..c_out)
        .map(|j| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b[j] as f64);
            (bn.beta[j] as f64 + (b - bn.running_mean[j] as f64) * scale[j]) as f32
        })
        .collect();
    ConvParams::new(
        Tensor::new(conv.weight.shape(), weight)?,
        Some(bias),
        conv.stride,
        conv.padding,
        conv.groups,
    )
}

/// Embeds a 1x1 kernel at the centre of a zero 3x3 kernel (padding 1).
pub fn pad_1x1_to_3x3(conv: &ConvParams) -> Result<ConvParams> {
    if conv.kernel() != (1, 1) {
        let (kh, kw) = conv.kernel();
        return config_err(format!("expected a 1x1 kernel, got {kh}x{kw}"));
    }
    let ws = conv.weight.shape();
    let shape = Shape { h: 3, w: 3, ..ws };
    let src = conv.weight.data();
    let weight = Tensor::from_fn(shape, |o, i, y, x| {
        if y == 1 && x == 1 {
            src[o * ws.c + i]
        } else {
            0.0
        }
    });
    ConvParams::new(weight, conv.bias.clone(), conv.stride, (1, 1), conv.groups)
}

/// A 3x3 grouped convolution computing the identity on `c` channels.
pub fn identity_to_3x3(c: usize, groups: usize) -> Result<ConvParams> {
    if c == 0 || groups == 0 || c % groups != 0 {
        return config_err(format!("{c} channels cannot be split into {groups} groups"));
    }
    let per_group = c / groups;
    let shape = Shape::new(c, per_group, 3, 3)?;
    let weight = Tensor::from_fn(shape, |o, i, y, x| {
        if y == 1 && x == 1 && i == o % per_group {
            1.0
        } else {
            0.0
        }
    });
    ConvParams::new(weight, None, (1, 1), (1, 1), groups)
}

/// Collapses the three branches into a single biased 3x3 conv such that
/// `silu(fused(x)) == repvgg_block_forward(x)`.
pub fn repvgg_fuse(block: &RepVggBlockParams) -> Result<ConvParams> {
    let dense = fold_bn(&block.conv3, &block.bn3)?;
    let one = pad_1x1_to_3x3(&fold_bn(&block.conv1, &block.bn1)?)?;
    let id = match &block.id_bn {
        Some(bn) => Some(fold_bn(&identity_to_3x3(block.conv3.c_in(), block.conv3.groups)?, bn)?),
        None => None,
    };
    if dense.weight.shape() != one.weight.shape() {
        return config_err(format!(
            "branch kernels disagree: {} vs {}",
            dense.weight.shape(),
            one.weight.shape()
        ));
    }
    let mut weight: Vec<f64> = dense.weight.data().iter().map(|&v| v as f64).collect();
    let mut bias: Vec<f64> = dense.bias.iter().flatten().map(|&v| v as f64).collect();
    let mut accumulate = |p: &ConvParams| -> Result<()> {
        if p.weight.shape() != dense.weight.shape() {
            return config_err(format!(
                "identity kernel {} does not match {}",
                p.weight.shape(),
                dense.weight.shape()
            ));
        }
        for (w, v) in weight.iter_mut().zip(p.weight.data()) {
            *w += *v as f64;
        }
        for (b, v) in bias.iter_mut().zip(p.bias.iter().flatten()) {
            *b += *v as f64;
        }
        Ok(())
    };
    accumulate(&one)?;
    if let Some(id) = &id {
        accumulate(id)?;
    }
    ConvParams::new(
        Tensor::new(dense.weight.shape(), weight.into_iter().map(|v| v as f32).collect())?,
        Some(bias.into_iter().map(|v| v as f32).collect()),
        dense.stride,
        dense.padding,
        dense.groups,
    )
}

pub(crate) fn pass_error(node: &str, err: Error) -> Error {
    let msg = match err {
        Error::Config(msg) => msg,
        other => other.to_string(),
    };
    Error::Pass {
        node: node.to_string(),
        msg,
    }
}

/// Applies every fusion pass to a copy of `model`. Fusing an already fused
/// model returns an identical model.
pub fn fuse_model(model: &Detector) -> Result<Detector> {
    let mut fused = model.clone();
    fused.try_for_each_unit_mut(&mut |u| match u {
        UnitMut::Conv(c) => c.fuse(),
        UnitMut::Rep(r) => r.fuse(),
    })?;
    Ok(fused)
}
