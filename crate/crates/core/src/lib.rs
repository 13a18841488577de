//! Multi-phase CT liver lesion detection at desk scale.

pub mod ablation;
pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod classes;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod energy;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod infer;
pub mod model;
pub mod parallel;
pub mod params;
pub mod phantom;
pub mod preprocess;
pub mod relation;
pub mod render;
pub mod rpn;
pub mod texture;
pub mod train;
pub mod volume;

pub use error::{CoreError, Result};
