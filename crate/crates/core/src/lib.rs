pub mod analysis;
pub mod autodiff;
pub mod backbones;
pub mod data;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod params;
pub mod report;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

mod binio;
