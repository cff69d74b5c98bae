//! RGB-thermal object detection with two decoupled query-based detectors
//! whose decoder stages exchange their best queries.

pub mod autograd;
pub mod coco;
pub mod checkpoint;
pub mod datagen;
pub mod detector;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod protocols;
pub mod raster;
pub mod train;

pub use detector::{BranchDetector, DetectorConfig, Modality};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, PostProcess};
pub use geometry::BBox;
pub use model::{Detection, MdqfModel};
