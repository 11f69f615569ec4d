//! Entropy-guided merging of model checkpoints, plus the small numerical
//! toolbox that grows around it: a binary tensor container, task-vector
//! arithmetic, a one-parameter pinhole camera solver, a toy attention neck,
//! and stereo evaluation metrics.
//!
//! Everything is deterministic: layer maps iterate in lexicographic order,
//! fixture generators are seeded, and the optimizers contain no hidden
//! randomness. Repeated runs over the same inputs produce byte-identical
//! artifacts.

// Validation guards are written as `!(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cli;
pub mod container;
pub mod emwm;
pub mod merge;
pub mod metrics;
pub mod neck;
pub mod synth;
pub mod tensor;

pub use camera::{solve_camera, CameraSolution, LmConfig, PointCloud, PointRecord};
pub use container::{read_container, write_container, ContainerError};
pub use emwm::{merge_emwm, EmwmConfig, EmwmReport, LayerResult};
pub use merge::{apply_merge, task_vector, LayerCoeffs, MergeCoefficients, TaskVector};
pub use metrics::{bad_pixel_rate, epe, pca_project3, ssim, GridMap, SsimConfig, StereoRig};
pub use neck::{frame_attention, modulate, AttentionParams, FeatureMap, MdeNeckStub};
pub use tensor::{validate_compat, Checkpoint, CompatReport, DType, Tensor};
