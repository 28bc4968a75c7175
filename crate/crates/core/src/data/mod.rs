//! Datasets, loaders and on-disk formats.

pub mod cifar;
mod dataset;
pub mod idx;
pub mod lff;
pub mod text;

pub use dataset::*;
pub use lff::{
    generate_synthetic, generate_synthetic_lff, FrozenFeatureSet, SplitManifest, SyntheticSpec,
};
