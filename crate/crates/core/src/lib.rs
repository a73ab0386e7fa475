pub mod assessor;
pub mod checkpoint;
pub mod degradation;
pub mod error;
pub mod evalstats;
pub mod facedata;
pub mod fprs;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod seed;
pub mod studysvc;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use checkpoint::FORMAT_VERSION;

/// Single-precision aliases used by training and assessment.
pub type Network32 = networks::Network<f32>;
pub type ImageBuffer32 = facedata::ImageBuffer<f32>;
pub type ScoreMap32 = facedata::ScoreMap<f32>;
pub type FaceSample32 = facedata::FaceSample<f32>;
pub type TrainState32 = trainer::TrainState<f32>;

/// Double-precision aliases, mainly for gradient checks.
pub type Network64 = networks::Network<f64>;
pub type ImageBuffer64 = facedata::ImageBuffer<f64>;
pub type ScoreMap64 = facedata::ScoreMap<f64>;
pub type FaceSample64 = facedata::FaceSample<f64>;
pub type TrainState64 = trainer::TrainState<f64>;
