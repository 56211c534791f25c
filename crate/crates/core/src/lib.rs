//! Instance segmentation with structural priors and teacher/student
//! distillation, built on a small reverse-mode tensor engine.

pub mod blocks;
pub mod calibrate;
pub mod distill;
pub mod flops;
pub mod infer;
pub mod losses;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod train;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
