//! Feature extractors producing the stride 8/16/32 pyramid.
//!
//! CSPDarknet follows the YOLOX design: Focus stem, four CSP stages, SPP
//! before the last stage. The RepVGG backbone uses a stride-2 RepVGG block
//! per stage followed by `depth(base)` stride-1 blocks, base repeats
//! `[3, 6, 9, 9]` (1, 2, 3, 3 at depth 0.33) and stage widths
//! `[64, 128, 256, 512, 1024] * width`, ending in the same SPP block.

use crate::error::{config_err, Result};
use crate::exec::{Eval, Exec};
use crate::layers::{units_of, ConvBlock, CspLayer, RepVggBlock, Spp, Unit, UnitMut, Units};
use crate::model_io::config::{BackboneKind, ModelConfig};
use crate::model_io::weights::{WeightReader, WeightStore};
use crate::tensor::{Shape, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Base channel widths of the three pyramid levels.
pub const PYRAMID_BASE: [usize; 3] = [256, 512, 1024];
pub const REPVGG_BASE_REPEATS: [usize; 4] = [3, 6, 9, 9];

/// Three pyramid levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub p3: T,
    pub p4: T,
    pub p5: T,
}

pub type FeaturePyramid = Pyramid<Tensor>;

impl<T> Pyramid<T> {
    pub fn from_array([p3, p4, p5]: [T; 3]) -> Self {
        Self { p3, p4, p5 }
    }

    pub fn levels(&self) -> [&T; 3] {
        [&self.p3, &self.p4, &self.p5]
    }

    pub fn into_array(self) -> [T; 3] {
        [self.p3, self.p4, self.p5]
    }
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Pyramid<Shape> {
        Pyramid::from_array(self.levels().map(Tensor::shape))
    }
}

impl Pyramid<Shape> {
    /// Checks the stride/width contract for a given network input.
    pub fn check(&self, input: Shape, channels: [usize; 3]) -> Result<()> {
        for ((s, stride), c) in self.levels().into_iter().zip(STRIDES).zip(channels) {
            let want = Shape {
                n: input.n,
                c,
                h: input.h / stride,
                w: input.w / stride,
            };
            if *s != want {
                return config_err(format!("pyramid level {s} violates the contract {want}"));
            }
        }
        Ok(())
    }
}

/// Pyramid channel counts for a config.
pub fn pyramid_channels(cfg: &ModelConfig) -> Result<[usize; 3]> {
    Ok([
        cfg.channels(PYRAMID_BASE[0])?,
        cfg.channels(PYRAMID_BASE[1])?,
        cfg.channels(PYRAMID_BASE[2])?,
    ])
}

fn check_input(x: Shape) -> Result<()> {
    if x.c != 3 || x.h % 32 != 0 || x.w % 32 != 0 {
        return config_err(format!(
            "backbone input must have 3 channels and spatial dims divisible by 32, got {x}"
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CspStage {
    pub down: ConvBlock,
    pub spp: Option<Spp>,
    pub csp: CspLayer,
}
units_of!(CspStage => down, spp, csp);

#[derive(Clone, Debug, PartialEq)]
pub struct CspDarknet {
    pub stem: ConvBlock,
    pub stages: Vec<CspStage>,
}
units_of!(CspDarknet => stem, stages);

impl CspDarknet {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let ch = |b| cfg.channels(b);
        let stem = ConvBlock::load(r, &format!("{prefix}.stem"), 12, ch(64)?, 3, 1, 1, true)?;
        let mut stages = Vec::new();
        let mut c_in = ch(64)?;
        for (i, (base, depth)) in [(128, 3), (256, 9), (512, 9), (1024, 3)].into_iter().enumerate() {
            let name = format!("{prefix}.dark{}", i + 2);
            let c = ch(base)?;
            let last = i == 3;
            stages.push(CspStage {
                down: ConvBlock::load(r, &format!("{name}.down"), c_in, c, 3, 2, 1, true)?,
                spp: if last { Some(Spp::load(r, &format!("{name}.spp"), c, c)?) } else { None },
                csp: CspLayer::load(r, &format!("{name}.csp"), c, c, cfg.depth(depth), !last)?,
            });
            c_in = c;
        }
        Ok(Self { stem, stages })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<Pyramid<E::Value>> {
        let x = e.focus(x)?;
        let mut x = self.stem.run(e, &x)?;
        let mut outs = Vec::new();
        for stage in &self.stages {
            x = stage.down.run(e, &x)?;
            if let Some(spp) = &stage.spp {
                x = spp.run(e, &x)?;
            }
            x = stage.csp.run(e, &x)?;
            outs.push(x.clone());
        }
        let [_, p3, p4, p5]: [E::Value; 4] = outs.try_into().map_err(|_| unreachable_stages())?;
        Ok(Pyramid { p3, p4, p5 })
    }
}

fn unreachable_stages() -> crate::error::Error {
    crate::error::Error::Config("backbone must have four stages".into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepVggStage {
    pub blocks: Vec<RepVggBlock>,
    pub spp: Option<Spp>,
}
units_of!(RepVggStage => blocks, spp);

#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBackbone {
    pub stem: RepVggBlock,
    pub stages: Vec<RepVggStage>,
}
units_of!(RepVggBackbone => stem, stages);

impl RepVggBackbone {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let stem_c = cfg.channels(64)?;
        let stem = RepVggBlock::load(r, &format!("{prefix}.stem"), 3, stem_c, 2)?;
        let mut c_in = stem_c;
        let mut stages = Vec::new();
        for (i, (base, repeats)) in [128, 256, 512, 1024].into_iter().zip(REPVGG_BASE_REPEATS).enumerate() {
            let name = format!("{prefix}.stage{}", i + 1);
            let c = cfg.channels(base)?;
            let mut blocks = vec![RepVggBlock::load(r, &format!("{name}.0"), c_in, c, 2)?];
            for j in 0..cfg.depth(repeats) {
                blocks.push(RepVggBlock::load(r, &format!("{name}.{}", j + 1), c, c, 1)?);
            }
            let spp = if i == 3 { Some(Spp::load(r, &format!("{name}.spp"), c, c)?) } else { None };
            stages.push(RepVggStage { blocks, spp });
            c_in = c;
        }
        Ok(Self { stem, stages })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<Pyramid<E::Value>> {
        let mut x = self.stem.run(e, x)?;
        let mut outs = Vec::new();
        for stage in &self.stages {
            for b in &stage.blocks {
                x = b.run(e, &x)?;
            }
            if let Some(spp) = &stage.spp {
                x = spp.run(e, &x)?;
            }
            outs.push(x.clone());
        }
        let [_, p3, p4, p5]: [E::Value; 4] = outs.try_into().map_err(|_| unreachable_stages())?;
        Ok(Pyramid { p3, p4, p5 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    CspDarknet(CspDarknet),
    RepVgg(RepVggBackbone),
}

impl Backbone {
    pub fn load(r: &mut WeightReader, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.backbone {
            BackboneKind::CspDarknet => Self::CspDarknet(CspDarknet::load(r, prefix, cfg)?),
            BackboneKind::RepVgg => Self::RepVgg(RepVggBackbone::load(r, prefix, cfg)?),
        })
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<Pyramid<E::Value>> {
        match self {
            Self::CspDarknet(b) => b.run(e, x),
            Self::RepVgg(b) => b.run(e, x),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x.shape())?;
        self.run(&mut Eval, x)
    }
}

impl Units for Backbone {
    fn for_each_unit<'a>(&'a self, f: &mut dyn FnMut(Unit<'a>)) {
        match self {
            Self::CspDarknet(b) => b.for_each_unit(f),
            Self::RepVgg(b) => b.for_each_unit(f),
        }
    }
    fn try_for_each_unit_mut(&mut self, f: &mut dyn FnMut(UnitMut<'_>) -> Result<()>) -> Result<()> {
        match self {
            Self::CspDarknet(b) => b.try_for_each_unit_mut(f),
            Self::RepVgg(b) => b.try_for_each_unit_mut(f),
        }
    }
}

/// Runs the CSPDarknet backbone stored under `backbone.*` in `weights`.
/// Other sections of the store are ignored.
pub fn cspdarknet_forward(input: &Tensor, weights: &WeightStore, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    check_input(input.shape())?;
    CspDarknet::load(&mut WeightReader::new(weights), "backbone", cfg)?.run(&mut Eval, input)
}

/// Runs the RepVGG backbone stored under `backbone.*` in `weights`.
pub fn repvgg_backbone_forward(input: &Tensor, weights: &WeightStore, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    check_input(input.shape())?;
    RepVggBackbone::load(&mut WeightReader::new(weights), "backbone", cfg)?.run(&mut Eval, input)
}
