//! Pyramid-to-pyramid fusion: PAFPN, its GSConv variants, ASFF and the
//! parameter-free ASFF_Sim.
//!
//! ASFF runs on the PAFPN outputs. For every target level it brings the
//! other two levels to the target shape, predicts one logit plane per level
//! (`weight_pK` 1x1 conv blocks to 16 channels, then a biased 1x1 conv to 3
//! logits), softmaxes across levels, sums and applies an `expand` conv block
//! (3x3 for ASFF, 1x1 for ASFF_Sim).
//!
//! ASFF_Sim level unification: one octave down is a Focus slice followed by
//! a channel group mean; one octave up is nearest 2x upsampling followed by a
//! group mean; two octaves go through the intermediate level's width. Channel
//! counts must therefore divide evenly at every step.

use crate::backbone::{pyramid_channels, FeaturePyramid, Pyramid};
use crate::error::{config_err, Result};
use crate::exec::{Eval, Exec};
use crate::layers::{units_of, ConvBlock, CspLayer, GsConv, Unit, UnitMut, Units, VovGsCsp};
use crate::model_io::config::{ModelConfig, NeckKind};
use crate::model_io::weights::{WeightReader, WeightStore};
use crate::tensor::Tensor;

/// Intermediate width of the ASFF logit convs.
pub const ASFF_COMPRESS: usize = 16;

/// A standalone neck conv: dense conv block or GSConv.
#[derive(Clone, Debug, PartialEq)]
pub enum NeckConv {
    Dense(ConvBlock),
    Gs(GsConv),
}

impl NeckConv {
    #[allow(clippy::too_many_arguments)]
    fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, gs: bool) -> Result<Self> {
        Ok(if gs {
            Self::Gs(GsConv::load(r, name, c_in, c_out, k, stride, true)?)
        } else {
            Self::Dense(ConvBlock::load(r, name, c_in, c_out, k, stride, 1, true)?)
        })
    }

    fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self {
            Self::Dense(c) => c.run(e, x),
            Self::Gs(c) => c.run(e, x),
        }
    }
}

impl Units for NeckConv {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::Dense(c) => c.for_each_unit(f),
            Self::Gs(c) => c.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::Dense(c) => c.try_for_each_unit_mut(f),
            Self::Gs(c) => c.try_for_each_unit_mut(f),
        }
    }
}

/// Post-concat fusion block: CSP layer or GS cross-stage block.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionBlock {
    Csp(CspLayer),
    Vov(VovGsCsp),
}

impl FusionBlock {
    fn load(r: &mut WeightReader, name: &str, c_in: usize, c_out: usize, depth: usize, gs: bool) -> Result<Self> {
        Ok(if gs {
            Self::Vov(VovGsCsp::load(r, name, c_in, c_out, depth)?)
        } else {
            Self::Csp(CspLayer::load(r, name, c_in, c_out, depth, false)?)
        })
    }

    fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self {
            Self::Csp(b) => b.run(e, x),
            Self::Vov(b) => b.run(e, x),
        }
    }
}

impl Units for FusionBlock {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::Csp(b) => b.for_each_unit(f),
            Self::Vov(b) => b.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::Csp(b) => b.try_for_each_unit_mut(f),
            Self::Vov(b) => b.try_for_each_unit_mut(f),
        }
    }
}

/// Top-down then bottom-up path aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pafpn {
    pub lateral_conv0: NeckConv,
    pub c3_p4: FusionBlock,
    pub reduce_conv1: NeckConv,
    pub c3_p3: FusionBlock,
    pub bu_conv2: NeckConv,
    pub c3_n3: FusionBlock,
    pub bu_conv1: NeckConv,
    pub c3_n4: FusionBlock,
}
units_of!(Pafpn => lateral_conv0, c3_p4, reduce_conv1, c3_p3, bu_conv2, c3_n3, bu_conv1, c3_n4);

impl Pafpn {
    /// `gs_convs` swaps every standalone conv for a GSConv; `gs_fusion`
    /// swaps the CSP fusion blocks for GS cross-stage blocks.
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig, gs_convs: bool, gs_fusion: bool) -> Result<Self> {
        let [c3, c4, c5] = pyramid_channels(cfg)?;
        let n = cfg.depth(3);
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            lateral_conv0: NeckConv::load(r, &p("lateral_conv0"), c5, c4, 1, 1, gs_convs)?,
            c3_p4: FusionBlock::load(r, &p("c3_p4"), 2 * c4, c4, n, gs_fusion)?,
            reduce_conv1: NeckConv::load(r, &p("reduce_conv1"), c4, c3, 1, 1, gs_convs)?,
            c3_p3: FusionBlock::load(r, &p("c3_p3"), 2 * c3, c3, n, gs_fusion)?,
            bu_conv2: NeckConv::load(r, &p("bu_conv2"), c3, c3, 3, 2, gs_convs)?,
            c3_n3: FusionBlock::load(r, &p("c3_n3"), 2 * c3, c4, n, gs_fusion)?,
            bu_conv1: NeckConv::load(r, &p("bu_conv1"), c4, c4, 3, 2, gs_convs)?,
            c3_n4: FusionBlock::load(r, &p("c3_n4"), 2 * c4, c5, n, gs_fusion)?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<Pyramid<E::Value>> {
        let fpn_out0 = self.lateral_conv0.run(e, &pyr.p5)?;
        let up = e.upsample2x(&fpn_out0)?;
        let f_out0 = e.concat(&[&up, &pyr.p4])?;
        let f_out0 = self.c3_p4.run(e, &f_out0)?;

        let fpn_out1 = self.reduce_conv1.run(e, &f_out0)?;
        let up = e.upsample2x(&fpn_out1)?;
        let f_out1 = e.concat(&[&up, &pyr.p3])?;
        let pan_out2 = self.c3_p3.run(e, &f_out1)?;

        let down = self.bu_conv2.run(e, &pan_out2)?;
        let p_out1 = e.concat(&[&down, &fpn_out1])?;
        let pan_out1 = self.c3_n3.run(e, &p_out1)?;

        let down = self.bu_conv1.run(e, &pan_out1)?;
        let p_out0 = e.concat(&[&down, &fpn_out0])?;
        let pan_out0 = self.c3_n4.run(e, &p_out0)?;

        Ok(Pyramid {
            p3: pan_out2,
            p4: pan_out1,
            p5: pan_out0,
        })
    }
}

/// Learned resize of one source level to a target level.
#[derive(Clone, Debug, PartialEq)]
pub enum Resize {
    /// 1x1 conv block to the target width, then `octaves` nearest 2x upsamples.
    Up { conv: ConvBlock, octaves: usize },
    /// Optional 3x3/2 max pool, then a stride-2 3x3 conv block.
    Down { conv: ConvBlock, pool: bool },
}

impl Resize {
    fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self {
            Self::Up { conv, octaves } => {
                let mut y = conv.run(e, x)?;
                for _ in 0..*octaves {
                    y = e.upsample2x(&y)?;
                }
                Ok(y)
            }
            Self::Down { conv, pool } => {
                if *pool {
                    let y = e.max_pool(x, 3, 2, 1)?;
                    conv.run(e, &y)
                } else {
                    conv.run(e, x)
                }
            }
        }
    }
}

impl Units for Resize {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::Up { conv, .. } | Self::Down { conv, .. } => conv.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::Up { conv, .. } | Self::Down { conv, .. } => conv.try_for_each_unit_mut(f),
        }
    }
}

/// Parameter-free shape unification between pyramid levels (0 = p3).
pub fn unify_levels<E: Exec>(e: &mut E, levels: [&E::Value; 3], channels: [usize; 3], from: usize, to: usize) -> Result<E::Value> {
    if from > 2 || to > 2 {
        return config_err(format!("pyramid levels are 0..=2, got {from} -> {to}"));
    }
    let mut x = levels[from].clone();
    let mut at = from;
    while at != to {
        let next = if to > at { at + 1 } else { at - 1 };
        x = if next > at { e.focus(&x)? } else { e.upsample2x(&x)? };
        x = e.group_mean(&x, channels[next])?;
        at = next;
    }
    Ok(x)
}

/// [`unify_levels`] on tensors.
pub fn asff_sim_unify(pyr: &FeaturePyramid, from_level: usize, to_level: usize) -> Result<Tensor> {
    let channels = pyr.levels().map(|t| t.shape().c);
    unify_levels(&mut Eval, pyr.levels(), channels, from_level, to_level)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsffLevel {
    pub level: usize,
    /// Learned resize per source level; `None` for the target itself and for
    /// every level in the parameter-free variant.
    pub resize: [Option<Resize>; 3],
    pub weight_convs: Vec<ConvBlock>,
    pub weight_levels: ConvBlock,
    pub expand: ConvBlock,
}
units_of!(AsffLevel => resize, weight_convs, weight_levels, expand);

const LEVEL_NAMES: [&str; 3] = ["p3", "p4", "p5"];

impl AsffLevel {
    fn load(r: &mut WeightReader, prefix: &str, level: usize, channels: [usize; 3], learned: bool) -> Result<Self> {
        let name = format!("{prefix}.{}", LEVEL_NAMES[level]);
        let c = channels[level];
        let mut resize: [Option<Resize>; 3] = [None, None, None];
        if learned {
            for (src, slot) in resize.iter_mut().enumerate() {
                let rname = format!("{name}.resize_{}", LEVEL_NAMES[src]);
                *slot = if src > level {
                    let conv = ConvBlock::load(r, &rname, channels[src], c, 1, 1, 1, true)?;
                    Some(Resize::Up { conv, octaves: src - level })
                } else if src < level {
                    let conv = ConvBlock::load(r, &rname, channels[src], c, 3, 2, 1, true)?;
                    Some(Resize::Down { conv, pool: level - src == 2 })
                } else {
                    None
                };
            }
        }
        let weight_convs = (0..3)
            .map(|src| ConvBlock::load(r, &format!("{name}.weight_{}", LEVEL_NAMES[src]), c, ASFF_COMPRESS, 1, 1, 1, true))
            .collect::<Result<_>>()?;
        let weight_levels = ConvBlock::load_plain(r, &format!("{name}.weight_levels"), 3 * ASFF_COMPRESS, 3, 1)?;
        let k = if learned { 3 } else { 1 };
        let expand = ConvBlock::load(r, &format!("{name}.expand"), c, c, k, 1, 1, true)?;
        Ok(Self {
            level,
            resize,
            weight_convs,
            weight_levels,
            expand,
        })
    }

    /// The three source levels at the target shape.
    pub fn unified<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>, channels: [usize; 3]) -> Result<[E::Value; 3]> {
        let levels = pyr.levels();
        let mut out = Vec::with_capacity(3);
        for src in 0..3 {
            out.push(match &self.resize[src] {
                Some(rs) => rs.run(e, levels[src])?,
                None => unify_levels(e, levels, channels, src, self.level)?,
            });
        }
        Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
    }

    /// Softmax fusion weights, shape (n, 3, h, w).
    pub fn weights<E: Exec>(&self, e: &mut E, unified: &[E::Value; 3]) -> Result<E::Value> {
        let mut parts = Vec::with_capacity(3);
        for (conv, x) in self.weight_convs.iter().zip(unified) {
            parts.push(conv.run(e, x)?);
        }
        let refs: Vec<&E::Value> = parts.iter().collect();
        let cat = e.concat(&refs)?;
        let logits = self.weight_levels.run(e, &cat)?;
        e.softmax_channels(&logits)
    }

    /// Weighted sum of the unified levels, before `expand`.
    pub fn fuse<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>, channels: [usize; 3]) -> Result<E::Value> {
        let unified = self.unified(e, pyr, channels)?;
        let w = self.weights(e, &unified)?;
        e.weighted_sum(&w, &[&unified[0], &unified[1], &unified[2]])
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>, channels: [usize; 3]) -> Result<E::Value> {
        let fused = self.fuse(e, pyr, channels)?;
        self.expand.run(e, &fused)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Asff {
    pub channels: [usize; 3],
    pub levels: Vec<AsffLevel>,
}
units_of!(Asff => levels);

impl Asff {
    pub fn load(r: &mut WeightReader, prefix: &str, channels: [usize; 3], learned: bool) -> Result<Self> {
        if !learned {
            for (a, b) in [(0, 1), (1, 2)] {
                if channels[b] % channels[a] != 0 || (4 * channels[a]) % channels[b] != 0 {
                    return config_err(format!(
                        "parameter-free unification cannot map {} <-> {} channels",
                        channels[a], channels[b]
                    ));
                }
            }
        }
        Ok(Self {
            channels,
            levels: (0..3)
                .map(|l| AsffLevel::load(r, prefix, l, channels, learned))
                .collect::<Result<_>>()?,
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<Pyramid<E::Value>> {
        let mut outs = Vec::with_capacity(3);
        for level in &self.levels {
            outs.push(level.run(e, pyr, self.channels)?);
        }
        Ok(Pyramid::from_array(outs.try_into().unwrap_or_else(|_| unreachable!())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub pafpn: Pafpn,
    pub asff: Option<Asff>,
}
units_of!(Neck => pafpn, asff);

impl Neck {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (gs_convs, gs_fusion) = match cfg.neck {
            NeckKind::GsConvAll => (true, true),
            NeckKind::GsConvPart => (true, false),
            _ => (false, false),
        };
        let pafpn = Pafpn::load(r, prefix, cfg, gs_convs, gs_fusion)?;
        let channels = pyramid_channels(cfg)?;
        let asff = match cfg.neck {
            NeckKind::Asff => Some(Asff::load(r, &format!("{prefix}.asff"), channels, true)?),
            NeckKind::AsffSim => Some(Asff::load(r, &format!("{prefix}.asff"), channels, false)?),
            _ => None,
        };
        Ok(Self { pafpn, asff })
    }

    pub fn run<E: Exec>(&self, e: &mut E, pyr: &Pyramid<E::Value>) -> Result<Pyramid<E::Value>> {
        let out = self.pafpn.run(e, pyr)?;
        match &self.asff {
            Some(asff) => asff.run(e, &out),
            None => Ok(out),
        }
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        self.run(&mut Eval, pyr)
    }
}

/// Runs a PAFPN stored under `neck.*`.
pub fn pafpn_forward(pyr: &FeaturePyramid, weights: &WeightStore, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    Pafpn::load(&mut WeightReader::new(weights), "neck", cfg, false, false)?.run(&mut Eval, pyr)
}

/// Runs a GSConv neck stored under `neck.*`; `all` also replaces the CSP
/// fusion blocks.
pub fn gsconv_neck_forward(pyr: &FeaturePyramid, weights: &WeightStore, cfg: &ModelConfig, all: bool) -> Result<FeaturePyramid> {
    Pafpn::load(&mut WeightReader::new(weights), "neck", cfg, true, all)?.run(&mut Eval, pyr)
}

/// ASFF fusion (before `expand`) for one target level of a learned ASFF
/// stored under `neck.asff.*`.
pub fn asff_fuse(pyr: &FeaturePyramid, level: usize, weights: &WeightStore) -> Result<Tensor> {
    if level > 2 {
        return config_err(format!("ASFF level must be 0..=2, got {level}"));
    }
    let channels = pyr.levels().map(|t| t.shape().c);
    let l = AsffLevel::load(&mut WeightReader::new(weights), "neck.asff", level, channels, true)?;
    l.fuse(&mut Eval, pyr, channels)
}

/// GSConv stored under `prefix` in `weights`.
pub fn gsconv_forward(input: &Tensor, weights: &WeightStore, prefix: &str, c_out: usize, k: usize, stride: usize) -> Result<Tensor> {
    let c_in = input.shape().c;
    GsConv::load(&mut WeightReader::new(weights), prefix, c_in, c_out, k, stride, true)?.forward(input)
}
