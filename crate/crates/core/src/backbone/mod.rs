//! Four-stage EMOv2 backbones built from i²RMB blocks.

mod config;
mod file;
mod model;

pub use config::{
    BackboneConfig, BlockPlan, HeadConfig, Layout, StageConfig, StemConfig, DEFAULT_DROP_PATH, PRESETS,
};
pub use model::{Backbone, Stem, OUTPUT_STRIDE};
