//! Hand-object pose estimation at desk scale.
//!
//! A self-contained pipeline: a small convolutional backbone predicts
//! per-joint heatmaps and an object segmentation mask, a contextual
//! refinement block (CIET) enhances the features, and an encoder-decoder
//! with combined sigmoid*softmax attention associates keypoints with hand
//! identities and regresses 3D poses. Training data comes from a built-in
//! deterministic synthetic scene generator; evaluation implements MPJPE,
//! MRRPE, MSSD and joint-error AUC under scale+translation and Procrustes
//! alignment.
//!
//! Everything runs in f64 on the CPU with reverse-mode gradients over a
//! recorded op graph, verified against an independent central-difference
//! oracle.

pub mod backbone;
pub mod checkpoint;
pub mod ciet;
pub mod commands;
pub mod config;
pub mod error;
pub mod fdgrad;
pub mod losses;
pub mod mat3;
pub mod metrics;
pub mod model;
pub mod params;
pub mod posetr;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Token embedding width used throughout the transformer stage.
pub const EMBED_DIM: usize = 256;
/// Heatmap / feature-map spatial extent.
pub const GRID: usize = 32;
/// Rendered image extent.
pub const IMAGE_SIZE: usize = 64;
/// Joints per hand.
pub const NUM_JOINTS: usize = 21;
/// Hands per scene.
pub const NUM_HANDS: usize = 2;
/// Object points sampled from the segmentation mask.
pub const NUM_OBJECT_POINTS: usize = 20;
/// Identity classes: 2 hands x 21 joints, one object class, one background.
pub const NUM_IDENTITY_CLASSES: usize = NUM_HANDS * NUM_JOINTS + 2;
/// Identity class index for object points.
pub const OBJECT_CLASS: usize = NUM_HANDS * NUM_JOINTS;
/// Identity class index for background.
pub const BACKGROUND_CLASS: usize = NUM_HANDS * NUM_JOINTS + 1;
