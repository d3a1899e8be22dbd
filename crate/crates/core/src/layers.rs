//! Building blocks shared by backbones, necks and heads.
//!
//! Each block knows how to load itself from a [`WeightReader`], run on any
//! [`Exec`] backend and enumerate its leaf units (conv blocks and RepVGG
//! blocks) for export and fusion.

use crate::conv::ConvParams;
use crate::error::{config_err, Result};
use crate::exec::{Eval, Exec};
use crate::model_io::weights::{export_bn, export_conv, Role, WeightReader, WeightStore};
use crate::ops::BatchNormParams;
use crate::reparam;
use crate::tensor::Tensor;

/// Epsilon used by every batch norm in the model zoo.
pub const BN_EPS: f32 = 1e-3;

pub enum Unit<'a> {
    Conv(&'a ConvBlock),
    Rep(&'a RepVggBlock),
}

pub enum UnitMut<'a> {
    Conv(&'a mut ConvBlock),
    Rep(&'a mut RepVggBlock),
}

/// Enumerates leaf units in a fixed order.
pub trait Units {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>));
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()>;
}

impl<T: Units> Units for Vec<T> {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        self.iter().for_each(|u| u.for_each_unit(f));
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        self.iter_mut().try_for_each(|u| u.try_for_each_unit_mut(f))
    }
}

impl<T: Units, const N: usize> Units for [T; N] {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        self.iter().for_each(|u| u.for_each_unit(f));
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        self.iter_mut().try_for_each(|u| u.try_for_each_unit_mut(f))
    }
}

impl<T: Units> Units for Option<T> {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        if let Some(u) = self {
            u.for_each_unit(f);
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Some(u) => u.try_for_each_unit_mut(f),
            None => Ok(()),
        }
    }
}

/// Implements [`Units`] by visiting the listed fields in order.
macro_rules! units_of {
    ($ty:ty => $($field:ident),+) => {
        impl $crate::layers::Units for $ty {
            fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut($crate::layers::Unit<'a>)) {
                $( self.$field.for_each_unit(f); )+
            }
            fn try_for_each_unit_mut(
                &mut self,
                f: &mut dyn FnMut($crate::layers::UnitMut<'_>) -> $crate::error::Result<()>,
            ) -> $crate::error::Result<()> {
                $( self.$field.try_for_each_unit_mut(f)?; )+
                Ok(())
            }
        }
    };
}
pub(crate) use units_of;

/// Convolution, optional batch norm, optional SiLU. After BN folding the
/// norm is gone and the conv carries a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub conv: ConvParams,
    pub bn: Option<BatchNormParams>,
    pub act: bool,
    /// Plain biased convs are stored as `name.weight` / `name.bias`; normed
    /// blocks as `name.conv.*` plus `name.bn.*`.
    pub plain: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        r: &mut WeightReader,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return config_err(format!(
                "`{name}`: {c_in}->{c_out} channels not divisible by {groups} groups"
            ));
        }
        let weight = r.take_tensor(&format!("{name}.conv.weight"), [c_out, c_in / groups, k, k])?;
        let fused = r.contains(&format!("{name}.conv.bias")) && !r.contains(&format!("{name}.bn.weight"));
        let (bias, bn) = if fused {
            (Some(r.take(&format!("{name}.conv.bias"), &[c_out], Role::Bias)?), None)
        } else {
            (None, Some(r.take_bn(&format!("{name}.bn"), c_out, BN_EPS)?))
        };
        Ok(Self {
            name: name.to_string(),
            conv: ConvParams::square(weight, bias, stride, groups)?,
            bn,
            act,
            plain: false,
        })
    }

    /// Biased convolution without norm or activation (prediction layers,
    /// attention projections, fusion logits).
    pub fn load_plain(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let weight = r.take_tensor(&format!("{name}.weight"), [c_out, c_in, k, k])?;
        let bias = r.take(&format!("{name}.bias"), &[c_out], Role::Bias)?;
        Ok(Self {
            name: name.to_string(),
            conv: ConvParams::square(weight, Some(bias), 1, 1)?,
            bn: None,
            act: false,
            plain: true,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let mut y = e.conv(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = e.batch_norm(&y, bn)?;
        }
        if self.act {
            y = e.silu(&y)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(&mut Eval, x)
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn export(&self, store: &mut WeightStore) {
        if self.plain {
            export_conv(store, &self.name, &self.conv);
            return;
        }
        export_conv(store, &format!("{}.conv", self.name), &self.conv);
        if let Some(bn) = &self.bn {
            export_bn(store, &format!("{}.bn", self.name), bn);
        }
    }

    pub fn is_fusable(&self) -> bool {
        self.bn.is_some()
    }

    /// Folds the batch norm into the convolution.
    pub fn fuse(&mut self) -> Result<()> {
        if let Some(bn) = self.bn.take() {
            self.conv = reparam::fold_bn(&self.conv, &bn).map_err(|e| reparam::pass_error(&self.name, e))?;
        }
        Ok(())
    }
}

impl Units for ConvBlock {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        f(Unit::Conv(self));
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        f(UnitMut::Conv(self))
    }
}

/// Training-time RepVGG parameterization: 3x3 conv + BN, 1x1 conv + BN and,
/// when shapes allow, a BN-only identity branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlockParams {
    pub conv3: ConvParams,
    pub bn3: BatchNormParams,
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub id_bn: Option<BatchNormParams>,
}

impl RepVggBlockParams {
    pub fn new(
        conv3: ConvParams,
        bn3: BatchNormParams,
        conv1: ConvParams,
        bn1: BatchNormParams,
        id_bn: Option<BatchNormParams>,
    ) -> Result<Self> {
        if conv3.kernel() != (3, 3) || conv3.padding != (1, 1) {
            return config_err("RepVGG 3x3 branch must be a 3x3 conv with padding 1");
        }
        if conv1.kernel() != (1, 1) || conv1.padding != (0, 0) {
            return config_err("RepVGG 1x1 branch must be a 1x1 conv without padding");
        }
        if conv3.c_in() != conv1.c_in()
            || conv3.c_out() != conv1.c_out()
            || conv3.stride != conv1.stride
            || conv3.groups != conv1.groups
        {
            return config_err("RepVGG branches disagree on channels, stride or groups");
        }
        let c = conv3.c_out();
        if bn3.channels() != c || bn1.channels() != c {
            return config_err("RepVGG branch norms do not match the output channels");
        }
        if let Some(id) = &id_bn {
            if conv3.c_in() != c || conv3.stride != (1, 1) || id.channels() != c {
                return config_err("RepVGG identity branch needs c_in == c_out and stride 1");
            }
        }
        Ok(Self { conv3, bn3, conv1, bn1, id_bn })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let a = e.conv(x, &self.conv3)?;
        let a = e.batch_norm(&a, &self.bn3)?;
        let b = e.conv(x, &self.conv1)?;
        let b = e.batch_norm(&b, &self.bn1)?;
        let mut y = e.add(&a, &b)?;
        if let Some(id) = &self.id_bn {
            let c = e.batch_norm(x, id)?;
            y = e.add(&y, &c)?;
        }
        e.silu(&y)
    }
}

/// `silu(bn3(conv3(x)) + bn1(conv1(x)) [+ id_bn(x)])`.
pub fn repvgg_block_forward(input: &Tensor, p: &RepVggBlockParams) -> Result<Tensor> {
    p.run(&mut Eval, input)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RepVggForm {
    Branches(RepVggBlockParams),
    /// Single 3x3 conv with bias, followed by SiLU.
    Fused(ConvParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlock {
    pub name: String,
    pub form: RepVggForm,
}

impl RepVggBlock {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let fused_key = format!("{name}.fused.weight");
        if r.contains(&fused_key) {
            let weight = r.take_tensor(&fused_key, [c_out, c_in, 3, 3])?;
            let bias = r.take(&format!("{name}.fused.bias"), &[c_out], Role::Bias)?;
            return Ok(Self {
                name: name.to_string(),
                form: RepVggForm::Fused(ConvParams::square(weight, Some(bias), stride, 1)?),
            });
        }
        let w3 = r.take_tensor(&format!("{name}.conv3.weight"), [c_out, c_in, 3, 3])?;
        let bn3 = r.take_bn(&format!("{name}.bn3"), c_out, BN_EPS)?;
        let w1 = r.take_tensor(&format!("{name}.conv1.weight"), [c_out, c_in, 1, 1])?;
        let bn1 = r.take_bn(&format!("{name}.bn1"), c_out, BN_EPS)?;
        let id_bn = if c_in == c_out && stride == 1 {
            Some(r.take_bn(&format!("{name}.id_bn"), c_out, BN_EPS)?)
        } else {
            None
        };
        let params = RepVggBlockParams::new(
            ConvParams::square(w3, None, stride, 1)?,
            bn3,
            ConvParams::new(w1, None, (stride, stride), (0, 0), 1)?,
            bn1,
            id_bn,
        )?;
        Ok(Self {
            name: name.to_string(),
            form: RepVggForm::Branches(params),
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match &self.form {
            RepVggForm::Branches(p) => p.run(e, x),
            RepVggForm::Fused(conv) => {
                let y = e.conv(x, conv)?;
                e.silu(&y)
            }
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        let n = &self.name;
        match &self.form {
            RepVggForm::Fused(conv) => export_conv(store, &format!("{n}.fused"), conv),
            RepVggForm::Branches(p) => {
                export_conv(store, &format!("{n}.conv3"), &p.conv3);
                export_bn(store, &format!("{n}.bn3"), &p.bn3);
                export_conv(store, &format!("{n}.conv1"), &p.conv1);
                export_bn(store, &format!("{n}.bn1"), &p.bn1);
                if let Some(id) = &p.id_bn {
                    export_bn(store, &format!("{n}.id_bn"), id);
                }
            }
        }
    }

    pub fn is_fusable(&self) -> bool {
        matches!(self.form, RepVggForm::Branches(_))
    }

    pub fn fuse(&mut self) -> Result<()> {
        if let RepVggForm::Branches(p) = &self.form {
            let fused = reparam::repvgg_fuse(p).map_err(|e| reparam::pass_error(&self.name, e))?;
            self.form = RepVggForm::Fused(fused);
        }
        Ok(())
    }
}

impl Units for RepVggBlock {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        f(Unit::Rep(self));
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        f(UnitMut::Rep(self))
    }
}

/// A 3x3 conv slot that is either a plain conv block or a RepVGG block.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvSlot {
    Vanilla(ConvBlock),
    Rep(RepVggBlock),
}

impl ConvSlot {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, rep: bool) -> Result<Self> {
        Ok(if rep {
            Self::Rep(RepVggBlock::load(r, name, c_in, c_out, 1)?)
        } else {
            Self::Vanilla(ConvBlock::load(r, name, c_in, c_out, 3, 1, 1, true)?)
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self {
            Self::Vanilla(c) => c.run(e, x),
            Self::Rep(c) => c.run(e, x),
        }
    }
}

impl Units for ConvSlot {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::Vanilla(c) => c.for_each_unit(f),
            Self::Rep(c) => c.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::Vanilla(c) => c.try_for_each_unit_mut(f),
            Self::Rep(c) => c.try_for_each_unit_mut(f),
        }
    }
}

/// 1x1 reduce, 3x3 expand, optional residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, shortcut: bool) -> Result<Self> {
        Ok(Self {
            conv1: ConvBlock::load(r, &format!("{name}.conv1"), c_in, c_out, 1, 1, 1, true)?,
            conv2: ConvBlock::load(r, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true)?,
            shortcut: shortcut && c_in == c_out,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = self.conv1.run(e, x)?;
        let y = self.conv2.run(e, &y)?;
        if self.shortcut {
            e.add(&y, x)
        } else {
            Ok(y)
        }
    }
}
units_of!(Bottleneck => conv1, conv2);

/// Cross-stage-partial layer: two 1x1 splits, bottlenecks on one, concat,
/// 1x1 merge.
#[derive(Clone, Debug, PartialEq)]
pub struct CspLayer {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub conv3: ConvBlock,
    pub m: Vec<Bottleneck>,
}

impl CspLayer {
    pub fn load(
        r: &mut WeightReader,
        name: &str,
        c_in: usize,
        c_out: usize,
        depth: usize,
        shortcut: bool,
    ) -> Result<Self> {
        let hidden = c_out / 2;
        Ok(Self {
            conv1: ConvBlock::load(r, &format!("{name}.conv1"), c_in, hidden, 1, 1, 1, true)?,
            conv2: ConvBlock::load(r, &format!("{name}.conv2"), c_in, hidden, 1, 1, 1, true)?,
            conv3: ConvBlock::load(r, &format!("{name}.conv3"), 2 * hidden, c_out, 1, 1, 1, true)?,
            m: (0..depth)
                .map(|i| Bottleneck::load(r, &format!("{name}.m.{i}"), hidden, hidden, shortcut))
                .collect::<Result<_>>()?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let mut a = self.conv1.run(e, x)?;
        for b in &self.m {
            a = b.run(e, &a)?;
        }
        let b = self.conv2.run(e, x)?;
        let y = e.concat(&[&a, &b])?;
        self.conv3.run(e, &y)
    }
}
units_of!(CspLayer => conv1, conv2, conv3, m);

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

/// Spatial pyramid pooling bottleneck with stride-1 max pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Spp {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
}

impl Spp {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = c_in / 2;
        Ok(Self {
            conv1: ConvBlock::load(r, &format!("{name}.conv1"), c_in, hidden, 1, 1, 1, true)?,
            conv2: ConvBlock::load(
                r,
                &format!("{name}.conv2"),
                hidden * (SPP_KERNELS.len() + 1),
                c_out,
                1,
                1,
                1,
                true,
            )?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let x = self.conv1.run(e, x)?;
        let mut parts = vec![x.clone()];
        for k in SPP_KERNELS {
            parts.push(e.max_pool(&x, k, 1, k / 2)?);
        }
        let refs: Vec<&E::Value> = parts.iter().collect();
        let y = e.concat(&refs)?;
        self.conv2.run(e, &y)
    }
}
units_of!(Spp => conv1, conv2);

/// Half dense conv, half 5x5 depthwise conv of that result, concatenated and
/// channel-shuffled with two groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GsConv {
    pub dense: ConvBlock,
    pub depthwise: ConvBlock,
}

pub const GS_DEPTHWISE_KERNEL: usize = 5;

impl GsConv {
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        r: &mut WeightReader,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: bool,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return config_err(format!("`{name}`: GSConv needs an even output channel count, got {c_out}"));
        }
        let half = c_out / 2;
        Ok(Self {
            dense: ConvBlock::load(r, &format!("{name}.cv1"), c_in, half, k, stride, 1, act)?,
            depthwise: ConvBlock::load(r, &format!("{name}.cv2"), half, half, GS_DEPTHWISE_KERNEL, 1, half, act)?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y1 = self.dense.run(e, x)?;
        let y2 = self.depthwise.run(e, &y1)?;
        let y = e.concat(&[&y1, &y2])?;
        e.shuffle(&y, 2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(&mut Eval, x)
    }
}
units_of!(GsConv => dense, depthwise);

/// Two stacked GSConvs (1x1 squeeze, 1x1 expand without activation) plus a
/// depthwise 3x3 shortcut, summed.
#[derive(Clone, Debug, PartialEq)]
pub struct GsBottleneck {
    pub gs1: GsConv,
    pub gs2: GsConv,
    pub shortcut: ConvBlock,
}

impl GsBottleneck {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = c_out / 2;
        Ok(Self {
            gs1: GsConv::load(r, &format!("{name}.gs1"), c_in, hidden, 1, 1, true)?,
            gs2: GsConv::load(r, &format!("{name}.gs2"), hidden, c_out, 1, 1, false)?,
            shortcut: ConvBlock::load(r, &format!("{name}.shortcut"), c_in, c_out, 3, 1, c_in.min(c_out), false)?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let a = self.gs1.run(e, x)?;
        let a = self.gs2.run(e, &a)?;
        let b = self.shortcut.run(e, x)?;
        e.add(&a, &b)
    }
}
units_of!(GsBottleneck => gs1, gs2, shortcut);

/// Cross-stage block built from GS bottlenecks: 1x1 reduce, bottlenecks,
/// concat with the reduced input, 1x1 merge.
#[derive(Clone, Debug, PartialEq)]
pub struct VovGsCsp {
    pub cv1: ConvBlock,
    pub m: Vec<GsBottleneck>,
    pub cv2: ConvBlock,
}

impl VovGsCsp {
    pub fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, depth: usize) -> Result<Self> {
        let hidden = c_out / 2;
        Ok(Self {
            cv1: ConvBlock::load(r, &format!("{name}.cv1"), c_in, hidden, 1, 1, 1, true)?,
            m: (0..depth)
                .map(|i| GsBottleneck::load(r, &format!("{name}.m.{i}"), hidden, hidden))
                .collect::<Result<_>>()?,
            cv2: ConvBlock::load(r, &format!("{name}.cv2"), 2 * hidden, c_out, 1, 1, 1, true)?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let x1 = self.cv1.run(e, x)?;
        let mut y = x1.clone();
        for b in &self.m {
            y = b.run(e, &y)?;
        }
        let y = e.concat(&[&y, &x1])?;
        self.cv2.run(e, &y)
    }
}
units_of!(VovGsCsp => cv1, m, cv2);

/// Exports every unit of `model` into a fresh store.
pub fn export_units(model: &impl Units) -> WeightStore {
    let mut store = WeightStore::new();
    model.for_each_unit(&mut |u| match u {
        Unit::Conv(c) => c.export(&mut store),
        Unit::Rep(r) => r.export(&mut store),
    });
    store
}

pub fn fusable_units(model: &impl Units) -> usize {
    let mut n = 0;
    model.for_each_unit(&mut |u| {
        let fusable = match u {
            Unit::Conv(c) => c.is_fusable(),
            Unit::Rep(r) => r.is_fusable(),
        };
        n += fusable as usize;
    });
    n
}
