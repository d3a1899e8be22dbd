//! Prediction heads.
//!
//! Both heads emit YOLOX-layout outputs per level: class logits, box
//! regression `(tx, ty, tw, th)` and an objectness logit.
//!
//! The TOOD head shares its `tood_stack` inter blocks and the two task
//! attentions across levels. Each attention average-pools the concatenated
//! inter features (S*C channels), reduces to C/4 with ReLU and expands to S
//! sigmoid layer weights. The task feature is the weighted sum of the inter
//! features, followed by two final 3x3 blocks per task and level, and the
//! 1x1 predictors; objectness hangs off the regression task.

use crate::backbone::{pyramid_channels, FeaturePyramid, Pyramid};
use crate::error::{config_err, Result};
use crate::exec::{Eval, Exec};
use crate::layers::{units_of, ConvBlock, ConvSlot, Unit, UnitMut, Units};
use crate::model_io::config::{ConvKind, HeadKind, ModelConfig, TOOD_STACK_RANGE};
use crate::model_io::weights::{WeightReader, WeightStore};
use crate::tensor::Tensor;

/// Raw head outputs for one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T> {
    pub cls: T,
    pub reg: T,
    pub obj: T,
}

/// Per-level outputs, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T = Tensor> {
    pub levels: Vec<LevelOutput<T>>,
}

/// Head width: `256 * width`.
pub fn head_width(cfg: &ModelConfig) -> Result<usize> {
    cfg.channels(256)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictors {
    pub cls: ConvBlock,
    pub reg: ConvBlock,
    pub obj: ConvBlock,
}
units_of!(Predictors => cls, reg, obj);

impl Predictors {
    fn load(r: &mut WeightReader, prefix: &str, i: usize, width: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            cls: ConvBlock::load_plain(r, &format!("{prefix}.cls_preds.{i}"), width, num_classes, 1)?,
            reg: ConvBlock::load_plain(r, &format!("{prefix}.reg_preds.{i}"), width, 4, 1)?,
            obj: ConvBlock::load_plain(r, &format!("{prefix}.obj_preds.{i}"), width, 1, 1)?,
        })
    }

    fn run<E: Exec>(&self, e: &mut E, cls_feat: &E::Value, reg_feat: &E::Value) -> Result<LevelOutput<E::Value>> {
        Ok(LevelOutput {
            cls: self.cls.run(e, cls_feat)?,
            reg: self.reg.run(e, reg_feat)?,
            obj: self.obj.run(e, reg_feat)?,
        })
    }
}

fn run_chain<E: Exec>(e: &mut E, blocks: &[ConvSlot], x: &E::Value) -> Result<E::Value> {
    let mut y = x.clone();
    for b in blocks {
        y = b.run(e, &y)?;
    }
    Ok(y)
}

fn load_chain(r: &mut WeightReader, prefix: &str, width: usize, n: usize, rep: bool) -> Result<Vec<ConvSlot>> {
    (0..n)
        .map(|j| ConvSlot::load(r, &format!("{prefix}.{j}"), width, width, rep))
        .collect()
}

/// Per-level stem, two 3x3 blocks per branch, predictors.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledLevel {
    pub stem: ConvBlock,
    pub cls_convs: Vec<ConvSlot>,
    pub reg_convs: Vec<ConvSlot>,
    pub preds: Predictors,
}
units_of!(DecoupledLevel => stem, cls_convs, reg_convs, preds);

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledHead {
    pub levels: Vec<DecoupledLevel>,
}
units_of!(DecoupledHead => levels);

impl DecoupledHead {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let width = head_width(cfg)?;
        let levels = pyramid_channels(cfg)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                Ok(DecoupledLevel {
                    stem: ConvBlock::load(r, &format!("{prefix}.stems.{i}"), c, width, 1, 1, 1, true)?,
                    cls_convs: load_chain(r, &format!("{prefix}.cls_convs.{i}"), width, 2, false)?,
                    reg_convs: load_chain(r, &format!("{prefix}.reg_convs.{i}"), width, 2, false)?,
                    preds: Predictors::load(r, prefix, i, width, cfg.num_classes)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<HeadOutputs<E::Value>> {
        let mut levels = Vec::with_capacity(3);
        for (l, x) in self.levels.iter().zip(pyr.levels()) {
            let x = l.stem.run(e, x)?;
            let cls = run_chain(e, &l.cls_convs, &x)?;
            let reg = run_chain(e, &l.reg_convs, &x)?;
            levels.push(l.preds.run(e, &cls, &reg)?);
        }
        Ok(HeadOutputs { levels })
    }
}

/// Layer attention for one task: pooled stack -> C/4 -> S sigmoid weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAttention {
    pub reduce: ConvBlock,
    pub expand: ConvBlock,
}
units_of!(TaskAttention => reduce, expand);

impl TaskAttention {
    fn load(r: &mut WeightReader, prefix: &str, width: usize, stack: usize) -> Result<Self> {
        Ok(Self {
            reduce: ConvBlock::load_plain(r, &format!("{prefix}.reduce"), stack * width, width / 4, 1)?,
            expand: ConvBlock::load_plain(r, &format!("{prefix}.expand"), width / 4, stack, 1)?,
        })
    }

    /// Layer weights of shape (n, S, 1, 1), each in (0, 1).
    pub fn weights<E: Exec>(&self, e: &mut E, stacked: &E::Value) -> Result<E::Value> {
        let pooled = e.global_avg_pool(stacked)?;
        let h = self.reduce.run(e, &pooled)?;
        let h = e.relu(&h)?;
        let logits = self.expand.run(e, &h)?;
        e.sigmoid(&logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToodLevel {
    pub stem: ConvBlock,
    pub cls_convs: Vec<ConvSlot>,
    pub reg_convs: Vec<ConvSlot>,
    pub preds: Predictors,
}
units_of!(ToodLevel => stem, cls_convs, reg_convs, preds);

/// Task-aligned head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToodHead {
    pub inter: Vec<ConvSlot>,
    pub cls_attn: TaskAttention,
    pub reg_attn: TaskAttention,
    pub levels: Vec<ToodLevel>,
}
units_of!(ToodHead => inter, cls_attn, reg_attn, levels);

pub type ToodHeadParams = ToodHead;

/// Intermediate values of one TOOD level, exposed for inspection.
#[derive(Clone, Debug)]
pub struct ToodTrace<T> {
    pub inter: Vec<T>,
    pub cls_weights: T,
    pub reg_weights: T,
    pub cls_feat: T,
    pub reg_feat: T,
}

impl ToodHead {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (lo, hi) = TOOD_STACK_RANGE;
        if !(lo..=hi).contains(&cfg.tood_stack) {
            return config_err(format!("tood_stack {} outside [{lo},{hi}]", cfg.tood_stack));
        }
        let width = head_width(cfg)?;
        let stack = cfg.tood_stack;
        let inter_rep = cfg.tood_conv_kind == ConvKind::Rep;
        let final_rep = cfg.tood_final_kind == ConvKind::Rep;
        let inter = load_chain(r, &format!("{prefix}.inter_convs"), width, stack, inter_rep)?;
        let cls_attn = TaskAttention::load(r, &format!("{prefix}.cls_attn"), width, stack)?;
        let reg_attn = TaskAttention::load(r, &format!("{prefix}.reg_attn"), width, stack)?;
        let levels = pyramid_channels(cfg)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                Ok(ToodLevel {
                    stem: ConvBlock::load(r, &format!("{prefix}.stems.{i}"), c, width, 1, 1, 1, true)?,
                    cls_convs: load_chain(r, &format!("{prefix}.cls_convs.{i}"), width, 2, final_rep)?,
                    reg_convs: load_chain(r, &format!("{prefix}.reg_convs.{i}"), width, 2, final_rep)?,
                    preds: Predictors::load(r, prefix, i, width, cfg.num_classes)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            inter,
            cls_attn,
            reg_attn,
            levels,
        })
    }

    pub fn stack(&self) -> usize {
        self.inter.len()
    }

    /// Stem, inter stack and attention-weighted task features of one level.
    pub fn task_features<E: Exec>(&self, e: &mut E, level: usize, x: &E::Value) -> Result<ToodTrace<E::Value>> {
        let mut f = self.levels[level].stem.run(e, x)?;
        let mut inter = Vec::with_capacity(self.stack());
        for b in &self.inter {
            f = b.run(e, &f)?;
            inter.push(f.clone());
        }
        let refs: Vec<&E::Value> = inter.iter().collect();
        let stacked = e.concat(&refs)?;
        let cls_weights = self.cls_attn.weights(e, &stacked)?;
        let reg_weights = self.reg_attn.weights(e, &stacked)?;
        let cls_feat = e.weighted_sum(&cls_weights, &refs)?;
        let reg_feat = e.weighted_sum(&reg_weights, &refs)?;
        Ok(ToodTrace {
            inter,
            cls_weights,
            reg_weights,
            cls_feat,
            reg_feat,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<HeadOutputs<E::Value>> {
        let mut levels = Vec::with_capacity(3);
        for (i, x) in pyr.levels().into_iter().enumerate() {
            let t = self.task_features(e, i, x)?;
            let l = &self.levels[i];
            let cls = run_chain(e, &l.cls_convs, &t.cls_feat)?;
            let reg = run_chain(e, &l.reg_convs, &t.reg_feat)?;
            levels.push(l.preds.run(e, &cls, &reg)?);
        }
        Ok(HeadOutputs { levels })
    }
}

/// Runs the decoupled head stored under `head.*` in `weights`.
pub fn decoupled_head_forward(pyr: &FeaturePyramid, weights: &WeightStore, cfg: &ModelConfig) -> Result<HeadOutputs> {
    DecoupledHead::load(&mut WeightReader::new(weights), "head", cfg)?.run(&mut Eval, pyr)
}

/// Runs a TOOD head on a pyramid.
pub fn tood_head_forward(pyr: &FeaturePyramid, params: &ToodHeadParams) -> Result<HeadOutputs> {
    params.run(&mut Eval, pyr)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Decoupled(DecoupledHead),
    Tood(ToodHead),
}

impl Head {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.head {
            HeadKind::Decoupled => Self::Decoupled(DecoupledHead::load(r, prefix, cfg)?),
            HeadKind::Tood => Self::Tood(ToodHead::load(r, prefix, cfg)?),
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<HeadOutputs<E::Value>> {
        match self {
            Self::Decoupled(h) => h.run(e, pyr),
            Self::Tood(h) => h.run(e, pyr),
        }
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<HeadOutputs> {
        self.run(&mut Eval, pyr)
    }
}

impl Units for Head {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::Decoupled(h) => h.for_each_unit(f),
            Self::Tood(h) => h.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::Decoupled(h) => h.try_for_each_unit_mut(f),
            Self::Tood(h) => h.try_for_each_unit_mut(f),
        }
    }
}
