//! Built-in equivalence and oracle checks, runnable from a release binary.
//!
//! Also hosts the seeded random generators the checks (and the test suites)
//! draw blocks from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, ConvParams};
use crate::error::Result;
use crate::image::Image;
use crate::layers::{repvgg_block_forward, RepVggBlockParams, BN_EPS};
use crate::model::Detector;
use crate::model_io::weights::WeightStore;
use crate::model_io::{init_random, ModelConfig};
use crate::ops::{self, batch_norm_infer, BatchNormParams};
use crate::postprocess::{batched_nms, iou, nms, Detection};
use crate::predictor::{preprocess_letterbox, preprocess_letterbox_fused};
use crate::reparam::{fold_bn, fuse_model, repvgg_fuse};
use crate::tensor::{Shape, Tensor};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut TestRng, shape: Shape, bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..=bound))
}

pub fn random_bn(rng: &mut TestRng, c: usize) -> BatchNormParams {
    let mut v = |lo: f32, hi: f32| (0..c).map(|_| rng.gen_range(lo..=hi)).collect::<Vec<_>>();
    BatchNormParams::new(v(0.5, 1.5), v(-0.5, 0.5), v(-0.5, 0.5), v(0.25, 2.0), BN_EPS)
        .expect("valid statistics")
}

/// Random conv; weights scaled to unit gain.
pub fn random_conv(
    rng: &mut TestRng,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
    bias: bool,
) -> ConvParams {
    let fan_in = c_in / groups * k * k;
    let b = (3.0 / fan_in as f32).sqrt();
    let w = random_tensor(rng, Shape { n: c_out, c: c_in / groups, h: k, w: k }, b);
    let bias = bias.then(|| (0..c_out).map(|_| rng.gen_range(-0.1..=0.1)).collect());
    ConvParams::square(w, bias, stride, groups).expect("valid conv")
}

/// Random RepVGG block; `identity` requires `c_in == c_out` and stride 1.
pub fn random_repvgg(rng: &mut TestRng, c: usize, stride: usize, groups: usize, identity: bool) -> RepVggBlockParams {
    let conv3 = random_conv(rng, c, c, 3, stride, groups, false);
    let bn3 = random_bn(rng, c);
    let conv1 = random_conv(rng, c, c, 1, stride, groups, false);
    let bn1 = random_bn(rng, c);
    let id_bn = identity.then(|| random_bn(rng, c));
    RepVggBlockParams::new(conv3, bn3, conv1, bn1, id_bn).expect("valid block")
}

/// Random detections with integer-grid boxes (so IoU ties are exercised).
pub fn random_detections(rng: &mut TestRng, max_boxes: usize, max_classes: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=max_boxes);
    let classes = rng.gen_range(1..=max_classes);
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0..200) as f32;
            let y = rng.gen_range(0..200) as f32;
            let w = rng.gen_range(1..60) as f32;
            let h = rng.gen_range(1..60) as f32;
            Detection {
                class_id: rng.gen_range(0..classes),
                score: rng.gen_range(0..1000) as f32 / 1000.0,
                bbox: [x, y, x + w, y + h],
            }
        })
        .collect()
}

pub fn random_store(rng: &mut TestRng, max_entries: usize) -> WeightStore {
    let mut store = WeightStore::new();
    for i in 0..rng.gen_range(0..=max_entries) {
        let rank = rng.gen_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
        let n = dims.iter().product();
        let data = (0..n).map(|_| f32::from_bits(rng.gen())).collect();
        store.insert(format!("t{i}.w"), dims, data).expect("unique names");
    }
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Direct nested-loop convolution.
fn direct_conv(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out = p.output_shape(x.shape())?;
    let ws = p.weight.shape();
    let (cg_in, cg_out) = (ws.c, out.c / p.groups);
    Ok(Tensor::from_fn(out, |n, co, oy, ox| {
        let g = co / cg_out;
        let mut acc = p.bias.as_ref().map_or(0.0, |b| f64::from(b[co]));
        for ci in 0..cg_in {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                    let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < x.shape().h && (ix as usize) < x.shape().w {
                        acc += f64::from(x.at(n, g * cg_in + ci, iy as usize, ix as usize))
                            * f64::from(p.weight.at(co, ci, ky, kx));
                    }
                }
            }
        }
        acc as f32
    }))
}

fn brute_nms(dets: &[Detection], t: f32) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    while let Some(b) = (0..dets.len())
        .filter(|&i| alive[i])
        .reduce(|b, i| if dets[i].score > dets[b].score { i } else { b })
    {
        out.push(dets[b].clone());
        for i in 0..dets.len() {
            if dets[i].class_id == dets[b].class_id && iou(dets[i].bbox, dets[b].bbox) > t {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    out
}

fn same_set(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len() && a.iter().all(|d| b.contains(d))
}

/// Runs every check; `seed` varies the random cases.
pub fn run(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    out.push(check("conv2d matches direct convolution", || {
        let mut worst = 0.0f32;
        for _ in 0..20 {
            let groups = [1, 2, 4][r.gen_range(0..3)];
            let c_in = groups * r.gen_range(1..4);
            let c_out = groups * r.gen_range(1..4);
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (stride, bias): (usize, bool) = (r.gen_range(1..3), r.gen());
            let p = random_conv(&mut r, c_in, c_out, k, stride, groups, bias);
            let (h, w) = (r.gen_range(k..12), r.gen_range(k..12));
            let x = random_tensor(&mut r, Shape { n: 1, c: c_in, h, w }, 1.0);
            worst = worst.max(conv2d(&x, &p)?.max_abs_diff(&direct_conv(&x, &p)?));
        }
        Ok((worst < 1e-5, format!("max abs diff {worst:.3e}")))
    }));

    out.push(check("BN folding preserves conv+BN", || {
        let mut worst = 0.0f32;
        for _ in 0..50 {
            let c = r.gen_range(1..8);
            let bias: bool = r.gen();
            let p = random_conv(&mut r, c, c, 3, 1, 1, bias);
            let bn = random_bn(&mut r, c);
            let x = random_tensor(&mut r, Shape { n: 1, c, h: 6, w: 6 }, 1.0);
            let want = batch_norm_infer(&conv2d(&x, &p)?, &bn)?;
            worst = worst.max(conv2d(&x, &fold_bn(&p, &bn)?)?.max_abs_diff(&want));
        }
        Ok((worst < 1e-5, format!("max abs diff {worst:.3e}")))
    }));

    out.push(check("RepVGG fusion preserves the block", || {
        let mut worst = 0.0f32;
        for i in 0..20 {
            let c = 2 * r.gen_range(1..5);
            let groups = if i % 2 == 0 { 1 } else { c };
            let identity = i % 4 < 2;
            let stride = if identity { 1 } else { r.gen_range(1..3) };
            let b = random_repvgg(&mut r, c, stride, groups, identity);
            let x = random_tensor(&mut r, Shape { n: 1, c, h: 8, w: 8 }, 1.0);
            let fused = ops::silu(&conv2d(&x, &repvgg_fuse(&b)?)?);
            worst = worst.max(fused.max_abs_diff(&repvgg_block_forward(&x, &b)?));
        }
        Ok((worst < 1e-5, format!("max abs diff {worst:.3e}")))
    }));

    out.push(check("NMS matches brute force; batched matches NMS", || {
        let mut bad = 0;
        for _ in 0..50 {
            let dets = random_detections(&mut r, 200, 10);
            let got = nms(&dets, 0.45);
            if !same_set(&got, &brute_nms(&dets, 0.45)) || batched_nms(&dets, 0.45) != got {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of 50 sets differ")))
    }));

    out.push(check("weight file round trip and corruption", || {
        let mut bad = 0;
        for _ in 0..20 {
            let store = random_store(&mut r, 8);
            let mut bytes = store.to_bytes();
            if !WeightStore::from_bytes(&bytes)?.bit_identical(&store) {
                bad += 1;
            }
            let i = r.gen_range(0..bytes.len());
            bytes[i] ^= 1 << r.gen_range(0..8);
            if WeightStore::from_bytes(&bytes).is_ok() {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} failures in 20 stores")))
    }));

    out.push(check("layout primitives", || {
        let x = random_tensor(&mut r, Shape { n: 1, c: 3, h: 4, w: 6 }, 1.0);
        let f = ops::focus_slice(&x)?;
        let focus_ok = (0..12).all(|c| {
            let (dy, dx) = [(0, 0), (1, 0), (0, 1), (1, 1)][c / 3];
            (0..2).all(|y| (0..3).all(|xx| f.at(0, c, y, xx) == x.at(0, c % 3, 2 * y + dy, 2 * xx + dx)))
        });
        let s = random_tensor(&mut r, Shape { n: 1, c: 6, h: 2, w: 2 }, 1.0);
        let mut seen: Vec<u32> = ops::channel_shuffle(&s, 2)?.data().iter().map(|v| v.to_bits()).collect();
        let mut orig: Vec<u32> = s.data().iter().map(|v| v.to_bits()).collect();
        seen.sort_unstable();
        orig.sort_unstable();
        let sm = ops::softmax_channels(&random_tensor(&mut r, Shape { n: 1, c: 3, h: 5, w: 5 }, 20.0));
        let dev = (0..25)
            .map(|p| ((0..3).map(|c| f64::from(sm.at(0, c, p / 5, p % 5))).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((
            focus_ok && seen == orig && dev <= 1e-6,
            format!("focus {focus_ok}, shuffle bijective {}, softmax deviation {dev:.1e}", seen == orig),
        ))
    }));

    out.push(check("fused preprocess equals reference", || {
        let img = Image::synthetic(75, 133, seed);
        let a = preprocess_letterbox(&img, (64, 96))?;
        let b = preprocess_letterbox_fused(&img, (64, 96))?;
        Ok((a == b, String::new()))
    }));

    out.push(check("fused model matches unfused model", || {
        let cfg = ModelConfig::pai_yolox_s().with_input(64, 64);
        let model = Detector::load(&cfg, &init_random(&cfg, seed)?)?;
        let fused = fuse_model(&model)?;
        let x = random_tensor(&mut r, Shape::new(1, 3, 64, 64)?, 1.0).map(|v| 127.5 * (v + 1.0));
        let (a, b) = (model.forward(&x)?, fused.forward(&x)?);
        let mut worst = 0.0f32;
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for (p, q) in [(&la.cls, &lb.cls), (&la.reg, &lb.reg), (&la.obj, &lb.obj)] {
                worst = worst.max(p.max_abs_diff(q));
            }
        }
        let left = fused.fusable_nodes();
        Ok((worst < 1e-4 && left == 0, format!("max abs diff {worst:.3e}, {left} fusable nodes left")))
    }));

    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
