//! Scene construction: articulated skeletons, object placement, occlusion.

use super::render::{convex_hull, point_in_hull, render_owner, Owner};
use super::{
    default_intrinsics, project, unproject, Scene, SceneConfig,
};
use crate::mat3::{self, Mat3, Vec3};
use crate::rng::Rng;
use crate::{IMAGE_SIZE, NUM_HANDS, NUM_JOINTS};

/// Template bone lengths per finger (thumb..pinky), before global scaling.
const METACARPAL: [f64; 5] = [55.0, 85.0, 90.0, 85.0, 75.0];
const PROXIMAL: [f64; 5] = [40.0, 45.0, 50.0, 45.0, 38.0];
const MIDDLE: [f64; 5] = [28.0, 30.0, 33.0, 30.0, 26.0];
const DISTAL: [f64; 5] = [22.0, 24.0, 26.0, 24.0, 22.0];
/// Finger splay about the palm normal, radians from the -y axis.
const AZIMUTH: [f64; 5] = [-0.90, -0.28, 0.0, 0.28, 0.58];
/// Wrist-to-middle-fingertip distance after scaling, in synthetic-mm.
pub const HAND_LENGTH: f64 = 180.0;

fn template_scale() -> f64 {
    HAND_LENGTH / (METACARPAL[2] + PROXIMAL[2] + MIDDLE[2] + DISTAL[2])
}

/// Scaled template length of the bone ending at joint `j` (j >= 1).
pub fn template_bone_length(j: usize) -> f64 {
    let f = (j - 1) / 4;
    let seg = (j - 1) % 4;
    let raw = match seg {
        0 => METACARPAL[f],
        1 => PROXIMAL[f],
        2 => MIDDLE[f],
        _ => DISTAL[f],
    };
    raw * template_scale()
}

/// Canonical right-hand skeleton with randomized joint angles, wrist at the
/// origin, fingers toward -y, curling toward the camera (-z).
fn canonical_hand(rng: &mut Rng) -> [[f64; 3]; NUM_JOINTS] {
    let s = template_scale();
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for f in 0..5 {
        let azim = AZIMUTH[f] + rng.range(-0.14, 0.14);
        let base_dir = mat3::apply(&mat3::rot_z(azim), &[0.0, -1.0, 0.0]);
        let lateral = mat3::apply(&mat3::rot_z(azim), &[1.0, 0.0, 0.0]);
        let mcp = mat3::scale(&base_dir, METACARPAL[f] * s);

        let curl_mcp = rng.range(0.0, 1.05);
        let curl_pip = rng.range(0.0, 1.3);
        let curl_dip = 0.6 * curl_pip;

        let d1 = mat3::apply(&mat3::axis_angle(&lateral, curl_mcp), &base_dir);
        let d2 = mat3::apply(&mat3::axis_angle(&lateral, curl_mcp + curl_pip), &base_dir);
        let d3 = mat3::apply(
            &mat3::axis_angle(&lateral, curl_mcp + curl_pip + curl_dip),
            &base_dir,
        );

        let base = 1 + 4 * f;
        joints[base] = mcp;
        joints[base + 1] = mat3::add(&joints[base], &mat3::scale(&d1, PROXIMAL[f] * s));
        joints[base + 2] = mat3::add(&joints[base + 1], &mat3::scale(&d2, MIDDLE[f] * s));
        joints[base + 3] = mat3::add(&joints[base + 2], &mat3::scale(&d3, DISTAL[f] * s));
    }
    joints
}

fn centroid(joints: &[[f64; 3]]) -> Vec3 {
    let mut c = [0.0; 3];
    for j in joints {
        c = mat3::add(&c, j);
    }
    mat3::scale(&c, 1.0 / joints.len() as f64)
}

/// Pose one hand: mirror for the left side, random global rotation, then
/// translate so the centroid projects to `target2d` at depth `z`.
fn place_hand(
    rng: &mut Rng,
    intrinsics: &Mat3,
    left: bool,
    target2d: [f64; 2],
    z: f64,
) -> [[f64; 3]; NUM_JOINTS] {
    let canonical = canonical_hand(rng);
    let rz = mat3::rot_z(rng.range(-0.5, 0.5));
    let rx = mat3::axis_angle(&[1.0, 0.0, 0.0], rng.range(-0.4, 0.4));
    let ry = mat3::axis_angle(&[0.0, 1.0, 0.0], rng.range(-0.4, 0.4));
    let rot = mat3::matmul(&rz, &mat3::matmul(&rx, &ry));

    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for (out, j) in joints.iter_mut().zip(&canonical) {
        let mut p = *j;
        if left {
            p[0] = -p[0];
        }
        *out = mat3::apply(&rot, &p);
    }
    let c = centroid(&joints);
    let anchor = unproject(intrinsics, &target2d, z);
    let shift = mat3::sub(&anchor, &c);
    for j in &mut joints {
        *j = mat3::add(j, &shift);
    }
    joints
}

fn all_in_frame(intrinsics: &Mat3, joints: &[[f64; 3]], margin: f64) -> bool {
    let hi = IMAGE_SIZE as f64 - margin;
    joints.iter().all(|j| {
        let [u, v] = project(intrinsics, j);
        u >= margin && u <= hi && v >= margin && v <= hi
    })
}

fn bbox2d(intrinsics: &Mat3, joints: &[[f64; 3]]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for j in joints {
        let [u, v] = project(intrinsics, j);
        b[0] = b[0].min(u);
        b[1] = b[1].max(u);
        b[2] = b[2].min(v);
        b[3] = b[3].max(v);
    }
    b
}

fn boxes_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] <= b[1] && b[0] <= a[1] && a[2] <= b[3] && b[2] <= a[3]
}

/// Deterministic scene synthesis. The same (seed, config) pair always
/// produces the identical scene.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = Rng::from_seed(seed);
    let intrinsics = default_intrinsics();
    let occluded_layout = cfg.occlusion_level > 0.0;

    // Hand placement. At occlusion level 0 the hands must not overlap in
    // the image, so keep drawing until the boxes separate.
    let mut hands = [[[0.0; 3]; NUM_JOINTS]; NUM_HANDS];
    let hand_present = [true, cfg.two_hands];
    for _attempt in 0..40 {
        let (c0, c1, z0, z1) = if occluded_layout {
            (
                [26.0 + rng.range(-3.0, 3.0), 32.0 + rng.range(-4.0, 4.0)],
                [38.0 + rng.range(-3.0, 3.0), 32.0 + rng.range(-4.0, 4.0)],
                rng.range(490.0, 540.0),
                rng.range(460.0, 515.0),
            )
        } else {
            (
                [17.0 + rng.range(-2.0, 2.0), 32.0 + rng.range(-3.0, 3.0)],
                [47.0 + rng.range(-2.0, 2.0), 32.0 + rng.range(-3.0, 3.0)],
                rng.range(490.0, 540.0),
                rng.range(490.0, 540.0),
            )
        };
        hands[0] = place_hand(&mut rng, &intrinsics, true, c0, z0);
        hands[1] = place_hand(&mut rng, &intrinsics, false, c1, z1);

        let in_frame = all_in_frame(&intrinsics, &hands[0], 2.0)
            && (!hand_present[1] || all_in_frame(&intrinsics, &hands[1], 2.0));
        if !in_frame {
            continue;
        }
        if !occluded_layout && hand_present[1] {
            let b0 = bbox2d(&intrinsics, &hands[0]);
            let b1 = bbox2d(&intrinsics, &hands[1]);
            if boxes_overlap(&b0, &b1) {
                continue;
            }
        }
        break;
    }
    if !hand_present[1] {
        hands[1] = [[0.0; 3]; NUM_JOINTS];
    }

    // Square-cross-section cuboid so quarter turns about z are symmetries.
    let half_xy = rng.range(30.0, 55.0);
    let half_z = rng.range(25.0, 60.0);
    let mut corners = [[0.0; 3]; 8];
    for (i, c) in corners.iter_mut().enumerate() {
        c[0] = if i & 1 == 0 { -half_xy } else { half_xy };
        c[1] = if i & 2 == 0 { -half_xy } else { half_xy };
        c[2] = if i & 4 == 0 { -half_z } else { half_z };
    }
    let spin = mat3::rot_z(rng.range(0.0, std::f64::consts::TAU));
    let tilt_axis = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), 2.0];
    let tilt = mat3::axis_angle(&tilt_axis, rng.range(0.0, 0.35));
    let object_rot = mat3::matmul(&tilt, &spin);

    let object_trans = place_object(
        &mut rng,
        &intrinsics,
        cfg,
        &hands,
        hand_present,
        &corners,
        &object_rot,
    );

    let mut scene = Scene {
        joints3d: hands,
        hand_present,
        corners,
        object_rot,
        object_trans,
        intrinsics,
        joints2d: [[[0.0; 2]; NUM_JOINTS]; NUM_HANDS],
        visibility: [[false; NUM_JOINTS]; NUM_HANDS],
        occlusion_ratio: 0.0,
        seed,
    };
    for h in 0..NUM_HANDS {
        for j in 0..NUM_JOINTS {
            scene.joints2d[h][j] = project(&intrinsics, &scene.joints3d[h][j]);
        }
    }

    // Visibility comes from the renderer's owner buffer so flags and pixels
    // can never disagree.
    let owners = render_owner(&scene);
    let mut occluded = 0usize;
    for h in 0..NUM_HANDS {
        if !scene.hand_present[h] {
            continue;
        }
        for j in 0..NUM_JOINTS {
            let [u, v] = scene.joints2d[h][j];
            let px = (u.round() as isize).clamp(0, IMAGE_SIZE as isize - 1) as usize;
            let py = (v.round() as isize).clamp(0, IMAGE_SIZE as isize - 1) as usize;
            let visible = match owners[py * IMAGE_SIZE + px] {
                Owner::Hand { hand, .. } => hand == h,
                Owner::Object => false,
                Owner::Background => true,
            };
            scene.visibility[h][j] = visible;
            if !visible {
                occluded += 1;
            }
        }
    }
    let present = scene.present_joint_count();
    scene.occlusion_ratio = if present == 0 { 0.0 } else { occluded as f64 / present as f64 };
    scene
}

/// Pick an object translation whose projected footprint covers roughly the
/// requested fraction of hand-0 joints. Level 0 places the object behind
/// both hands and away from them, which cannot occlude anything.
fn place_object(
    rng: &mut Rng,
    intrinsics: &Mat3,
    cfg: &SceneConfig,
    hands: &[[[f64; 3]; NUM_JOINTS]; NUM_HANDS],
    hand_present: [bool; NUM_HANDS],
    corners: &[[f64; 3]; 8],
    rot: &Mat3,
) -> Vec3 {
    if cfg.occlusion_level <= 0.0 {
        let z = hands
            .iter()
            .zip(hand_present)
            .filter(|(_, p)| *p)
            .flat_map(|(h, _)| h.iter().map(|j| j[2]))
            .fold(0.0f64, f64::max)
            + 150.0;
        // farthest free spot among a few fixed anchors
        let anchors = [[32.0, 10.0], [32.0, 54.0], [10.0, 32.0], [54.0, 32.0]];
        let joints2d: Vec<[f64; 2]> = hands
            .iter()
            .zip(hand_present)
            .filter(|(_, p)| *p)
            .flat_map(|(h, _)| h.iter().map(|j| project(intrinsics, j)))
            .collect();
        let best = anchors
            .iter()
            .max_by(|a, b| {
                let da = joints2d.iter().map(|j| (j[0] - a[0]).hypot(j[1] - a[1])).fold(f64::INFINITY, f64::min);
                let db = joints2d.iter().map(|j| (j[0] - b[0]).hypot(j[1] - b[1])).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        return unproject(intrinsics, best, z);
    }

    let hand0_min_z = hands[0].iter().map(|j| j[2]).fold(f64::INFINITY, f64::min);
    let z = hand0_min_z - 80.0;
    let center2d = {
        let c = centroid(&hands[0]);
        project(intrinsics, &c)
    };

    let mut best_t = unproject(intrinsics, &center2d, z);
    let mut best_score = f64::INFINITY;
    for _ in 0..24 {
        let r = rng.range(0.0, 16.0);
        let phi = rng.range(0.0, std::f64::consts::TAU);
        let target = [center2d[0] + r * phi.cos(), center2d[1] + r * phi.sin()];
        let t = unproject(intrinsics, &target, z);

        let projected: Vec<[f64; 2]> = corners
            .iter()
            .map(|c| project(intrinsics, &mat3::add(&mat3::apply(rot, c), &t)))
            .collect();
        let hull = convex_hull(&projected);
        let covered = hands[0]
            .iter()
            .filter(|j| point_in_hull(&hull, &project(intrinsics, j)))
            .count();
        let frac = covered as f64 / NUM_JOINTS as f64;
        let score = (frac - cfg.occlusion_level).abs();
        if score < best_score {
            best_score = score;
            best_t = t;
        }
    }
    best_t
}
