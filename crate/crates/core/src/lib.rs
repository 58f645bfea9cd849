//! Panoramic dental x-ray pipeline: tooth isolation with a genetic algorithm,
//! a capsule-network caries classifier over an ensemble of feature
//! extractors, and Grad-CAM explanations.

pub mod error;
pub mod imgproc;
pub mod autodiff;
pub mod capsnet;
pub mod ga_isolate;
pub mod jawsep;
pub mod training;
pub mod explain;
pub mod pipeline;

pub use error::{Error, Result};
