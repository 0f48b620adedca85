//! Deterministic synthetic hand-object scenes.
//!
//! Each scene holds two articulated 21-joint hand skeletons, a cuboid
//! object, a pinhole camera, projected 2D joints and per-joint visibility
//! flags. The world unit is "synthetic-mm": hands are scaled to ~180 units
//! from wrist to middle fingertip so error metrics read like millimetres.

mod gen;
mod io;
mod render;

pub use gen::{generate_scene, template_bone_length, HAND_LENGTH};
pub use io::{read_dataset, write_dataset, write_dataset_json, DatasetHeader};
pub use render::{gt_segmentation, render, render_owner, Owner};

use crate::mat3::{self, Mat3, Vec3};
use crate::{NUM_HANDS, NUM_JOINTS};
use serde::{Deserialize, Serialize};

/// Generation knobs: the hand count and how aggressively the object and the
/// other hand are allowed to cover hand 0.
#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub two_hands: bool,
    /// Target fraction of hand-0 joints hidden by the object; 0 guarantees a
    /// fully visible scene.
    pub occlusion_level: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { two_hands: true, occlusion_level: 0.25 }
    }
}

/// Ground truth for one rendered frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Absolute 3D joints in camera coordinates, [hand][joint][xyz].
    pub joints3d: [[[f64; 3]; NUM_JOINTS]; NUM_HANDS],
    pub hand_present: [bool; NUM_HANDS],
    /// Rest-pose cuboid corners, symmetric about the origin.
    pub corners: [[f64; 3]; 8],
    pub object_rot: Mat3,
    pub object_trans: Vec3,
    pub intrinsics: Mat3,
    /// Perspective projection of `joints3d`, in 64x64 image pixels.
    pub joints2d: [[[f64; 2]; NUM_JOINTS]; NUM_HANDS],
    /// False when the joint's pixel is covered by the object or the other
    /// hand (nearer in depth), as seen by the renderer.
    pub visibility: [[bool; NUM_JOINTS]; NUM_HANDS],
    /// Fraction of present joints that are occluded.
    pub occlusion_ratio: f64,
    pub seed: u64,
}

impl Scene {
    /// Project a camera-space point to image pixels.
    pub fn project(&self, p: &Vec3) -> [f64; 2] {
        project(&self.intrinsics, p)
    }

    /// Cuboid corners in camera space under the ground-truth pose.
    pub fn posed_corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (o, c) in out.iter_mut().zip(&self.corners) {
            *o = mat3::add(&mat3::apply(&self.object_rot, c), &self.object_trans);
        }
        out
    }

    /// Discrete symmetries of the generated object. The cuboid has a square
    /// x-y cross-section, so quarter turns about z map it onto itself.
    /// Identity comes first.
    pub fn symmetries() -> Vec<Mat3> {
        (0..4).map(|k| mat3::rot_z(k as f64 * std::f64::consts::FRAC_PI_2)).collect()
    }

    /// Number of joints belonging to present hands.
    pub fn present_joint_count(&self) -> usize {
        self.hand_present.iter().filter(|&&p| p).count() * NUM_JOINTS
    }
}

pub fn project(intrinsics: &Mat3, p: &Vec3) -> [f64; 2] {
    let (fx, fy) = (intrinsics[0][0], intrinsics[1][1]);
    let (cx, cy) = (intrinsics[0][2], intrinsics[1][2]);
    [fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy]
}

pub(crate) const FOCAL: f64 = 70.0;

pub(crate) fn default_intrinsics() -> Mat3 {
    let c = crate::IMAGE_SIZE as f64 / 2.0;
    [[FOCAL, 0.0, c], [0.0, FOCAL, c], [0.0, 0.0, 1.0]]
}

/// Inverse projection at a fixed depth.
pub(crate) fn unproject(intrinsics: &Mat3, uv: &[f64; 2], z: f64) -> Vec3 {
    let (fx, fy) = (intrinsics[0][0], intrinsics[1][1]);
    let (cx, cy) = (intrinsics[0][2], intrinsics[1][2]);
    [(uv[0] - cx) * z / fx, (uv[1] - cy) * z / fy, z]
}

/// Consecutive-joint pairs of the 21-joint skeleton: wrist to each finger's
/// MCP, then MCP-PIP-DIP-TIP along each finger.
pub fn bone_pairs() -> Vec<(usize, usize)> {
    let mut bones = Vec::with_capacity(20);
    for f in 0..5 {
        let base = 1 + 4 * f;
        bones.push((0, base));
        bones.push((base, base + 1));
        bones.push((base + 1, base + 2));
        bones.push((base + 2, base + 3));
    }
    bones
}
