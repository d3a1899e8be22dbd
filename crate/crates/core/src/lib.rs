//! Inference engine for YOLOX-style anchor-free detectors with RepVGG,
//! ASFF, GSConv and TOOD variants, an offline fusion pass and an
//! end-to-end predictor.

pub mod analysis;
pub mod backbone;
pub mod conv;
pub mod error;
pub mod exec;
pub mod head;
pub mod image;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod neck;
pub mod ops;
pub mod postprocess;
pub mod predictor;
pub mod reparam;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use model::Detector;
pub use tensor::{Shape, Tensor};
