//! A complete detector: backbone, neck and head built from a config and a
//! weight store.

use crate::backbone::{pyramid_channels, Backbone, FeaturePyramid};
use crate::error::{config_err, Result};
use crate::exec::{Eval, Exec};
use crate::head::{Head, HeadOutputs};
use crate::layers::{export_units, fusable_units, units_of};
use crate::model_io::config::ModelConfig;
use crate::model_io::weights::{ParamSpec, WeightReader, WeightStore};
use crate::neck::Neck;
use crate::tensor::{Shape, Tensor};

pub const SECTIONS: [&str; 3] = ["backbone", "neck", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}
units_of!(Detector => backbone, neck, head);

impl Detector {
    fn build(cfg: &ModelConfig, r: &mut WeightReader) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::load(r, "backbone", cfg)?,
            neck: Neck::load(r, "neck", cfg)?,
            head: Head::load(r, "head", cfg)?,
        })
    }

    /// Builds the model, requiring every stored weight to be used exactly
    /// once. Fused and unfused layouts are detected per block.
    pub fn load(cfg: &ModelConfig, store: &WeightStore) -> Result<Self> {
        let mut r = WeightReader::new(store);
        let model = Self::build(cfg, &mut r)?;
        r.finish()?;
        Ok(model)
    }

    /// Parameter list of the unfused (training-layout) model.
    pub fn schema(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
        let mut r = WeightReader::schema();
        Self::build(cfg, &mut r)?;
        r.finish()
    }

    pub fn export(&self) -> WeightStore {
        export_units(self)
    }

    /// Number of conv+BN pairs and multi-branch blocks left to fuse.
    pub fn fusable_nodes(&self) -> usize {
        fusable_units(self)
    }

    pub fn run<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<HeadOutputs<E::Value>> {
        let pyr = self.backbone.run(e, x)?;
        let pyr = self.neck.run(e, &pyr)?;
        self.head.run(e, &pyr)
    }

    pub fn check_input(&self, x: Shape) -> Result<()> {
        if x.c != 3 || x.h % 32 != 0 || x.w % 32 != 0 {
            return config_err(format!(
                "network input must be n x 3 x h x w with h, w divisible by 32, got {x}"
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<HeadOutputs> {
        self.check_input(x.shape())?;
        self.run(&mut Eval, x)
    }

    /// Backbone and neck only.
    pub fn features(&self, x: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(x.shape())?;
        let pyr = self.backbone.run(&mut Eval, x)?;
        self.neck.run(&mut Eval, &pyr)
    }

    pub fn pyramid_channels(&self) -> Result<[usize; 3]> {
        pyramid_channels(&self.cfg)
    }
}

/// Number of scalars in `store` that count as parameters: everything except
/// batch-norm running statistics.
pub fn learned_scalars<'a>(entries: impl Iterator<Item = (&'a str, usize)>) -> usize {
    entries
        .filter(|(name, _)| !name.ends_with(".running_mean") && !name.ends_with(".running_var"))
        .map(|(_, n)| n)
        .sum()
}
