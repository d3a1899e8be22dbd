//! Weight files, configuration text and random initialization.

pub mod config;
pub mod init;
pub mod weights;

pub use config::{parse_config, render_config, Config, ExportConfig, ModelConfig};
pub use init::{calibrate_bn, init_random, init_uniform, init_zeros};
pub use weights::{load_weights, save_weights, WeightStore};
