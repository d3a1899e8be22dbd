//! Deterministic random weights for testing without trained checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::HashMap;

use crate::conv::ConvParams;
use crate::error::Result;
use crate::exec::{Eval, Exec};
use crate::image::Image;
use crate::layers::{RepVggForm, UnitMut, Units};
use crate::model::Detector;
use crate::model_io::config::ModelConfig;
use crate::model_io::weights::{ParamSpec, Role, WeightStore};
use crate::ops::{self, BatchNormParams};
use crate::predictor::preprocess_letterbox_fused;
use crate::tensor::{Shape, Tensor};

/// Largest magnitude of any drawn value or offset.
pub const INIT_BOUND: f32 = 0.1;

/// Side of the square synthetic image used to calibrate batch-norm
/// statistics.
pub const CALIBRATION_SIZE: usize = 256;

/// Source sizes of the calibration batch; letterboxing the non-square ones
/// adds padded regions, as at inference time.
const CALIBRATION_IMAGES: [(usize, usize); 4] = [(256, 256), (192, 256), (256, 128), (160, 224)];

/// Random store for `cfg`, numerically shaped like a trained model.
///
/// Parameters are drawn in sorted name order from a ChaCha stream seeded with
/// `seed`: conv weights uniform in `[-b, b]` with
/// `b = min(0.1, sqrt(3 / fan_in))`, biases and batch-norm shifts uniform in
/// ±0.1, batch-norm scales `1 + u` with `u` uniform in ±0.1. Each batch
/// norm's running mean and variance are then set to the statistics of its
/// input on one forward pass over a small seeded batch of synthetic images,
/// so activations stay O(1) at every depth instead of compounding through
/// residual adds. The same seed gives a bit-identical store for any input
/// size.
pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    let mut specs = Detector::schema(cfg)?;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut model = Detector::load(cfg, &fill(&specs, seed))?;
    calibrate_bn(&mut model, seed)?;
    Ok(model.export())
}

/// Raw uniform draws without calibration. Running variances are `1 + u`.
pub fn init_uniform(cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    let mut specs = Detector::schema(cfg)?;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(fill(&specs, seed))
}

pub(crate) fn fill(specs: &[ParamSpec], seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for spec in specs {
        let n: usize = spec.dims.iter().product();
        let data: Vec<f32> = match spec.role {
            Role::ConvWeight => {
                let fan_in: usize = spec.dims[1..].iter().product();
                let b = INIT_BOUND.min((3.0 / fan_in as f32).sqrt());
                (0..n).map(|_| rng.gen_range(-b..=b)).collect()
            }
            Role::Bias | Role::BnBeta | Role::BnMean => {
                (0..n).map(|_| rng.gen_range(-INIT_BOUND..=INIT_BOUND)).collect()
            }
            Role::BnGamma | Role::BnVar => {
                (0..n).map(|_| 1.0 + rng.gen_range(-INIT_BOUND..=INIT_BOUND)).collect()
            }
        };
        store
            .insert(spec.name.clone(), spec.dims.clone(), data)
            .expect("schema names are unique and well-shaped");
    }
    store
}

/// Sets every unfused batch norm's running statistics to the per-channel
/// mean and (biased) variance of its input on a synthetic image. Norms are
/// calibrated in execution order, each seeing already-calibrated inputs.
pub fn calibrate_bn(model: &mut Detector, seed: u64) -> Result<()> {
    let s = CALIBRATION_SIZE;
    let mut data = Vec::new();
    for (i, &(h, w)) in CALIBRATION_IMAGES.iter().enumerate() {
        let image = Image::synthetic(h, w, seed.wrapping_add(i as u64));
        let (x, _) = preprocess_letterbox_fused(&image, (s, s))?;
        data.extend_from_slice(x.data());
    }
    let x = Tensor::new(Shape::new(CALIBRATION_IMAGES.len(), 3, s, s)?, data)?;
    let mut cal = Calibrate::default();
    model.run(&mut cal, &x)?;
    let stats = cal.stats;
    let apply = |bn: &mut BatchNormParams| {
        if let Some((mean, var)) = stats.get(&(bn as *const BatchNormParams as usize)) {
            bn.running_mean.clone_from(mean);
            bn.running_var.clone_from(var);
        }
    };
    model.try_for_each_unit_mut(&mut |u| {
        match u {
            UnitMut::Conv(c) => {
                if let Some(bn) = c.bn.as_mut() {
                    apply(bn);
                }
            }
            UnitMut::Rep(r) => {
                if let RepVggForm::Branches(p) = &mut r.form {
                    apply(&mut p.bn3);
                    apply(&mut p.bn1);
                    if let Some(bn) = p.id_bn.as_mut() {
                        apply(bn);
                    }
                }
            }
        }
        Ok(())
    })
}

/// Evaluation that normalizes with batch statistics and records them, keyed
/// by the address of the norm's parameters.
#[derive(Default)]
struct Calibrate {
    stats: HashMap<usize, (Vec<f32>, Vec<f32>)>,
}

impl Exec for Calibrate {
    type Value = Tensor;

    fn batch_norm(&mut self, x: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
        let s = x.shape();
        let count = (s.n * s.h * s.w) as f64;
        let (mut mean, mut var) = (Vec::with_capacity(s.c), Vec::with_capacity(s.c));
        for c in 0..s.c {
            let planes = || (0..s.n).flat_map(|n| x.plane(n, c).iter().map(|&v| f64::from(v)));
            let m = planes().sum::<f64>() / count;
            let v = planes().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean.push(m as f32);
            var.push(v as f32);
        }
        let live = BatchNormParams {
            running_mean: mean.clone(),
            running_var: var.clone(),
            ..bn.clone()
        };
        self.stats.insert(bn as *const BatchNormParams as usize, (mean, var));
        ops::batch_norm_infer(x, &live)
    }

    fn conv(&mut self, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
        Eval.conv(x, p)
    }
    fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.silu(x)
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.relu(x)
    }
    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.sigmoid(x)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Eval.add(a, b)
    }
    fn concat(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        Eval.concat(xs)
    }
    fn upsample2x(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.upsample2x(x)
    }
    fn focus(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.focus(x)
    }
    fn group_mean(&mut self, x: &Tensor, c_out: usize) -> Result<Tensor> {
        Eval.group_mean(x, c_out)
    }
    fn shuffle(&mut self, x: &Tensor, groups: usize) -> Result<Tensor> {
        Eval.shuffle(x, groups)
    }
    fn max_pool(&mut self, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
        Eval.max_pool(x, k, stride, pad)
    }
    fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.global_avg_pool(x)
    }
    fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        Eval.softmax_channels(x)
    }
    fn weighted_sum(&mut self, w: &Tensor, xs: &[&Tensor]) -> Result<Tensor> {
        Eval.weighted_sum(w, xs)
    }
}

/// All-zero store (batch-norm variances zero as well) for `cfg`.
pub fn init_zeros(cfg: &ModelConfig) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for spec in Detector::schema(cfg)? {
        let n = spec.dims.iter().product();
        store.insert(spec.name, spec.dims, vec![0.0; n])?;
    }
    Ok(store)
}
