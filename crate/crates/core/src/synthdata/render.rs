//! Depth-buffered rasterizer: object as a filled convex footprint, hands as
//! disks per joint and capsules per bone. The owner buffer drives the
//! occlusion flags so image and flags always agree.

use super::{bone_pairs, Scene};
use crate::tensor::Tensor;
use crate::{IMAGE_SIZE, NUM_HANDS, NUM_JOINTS};

pub const JOINT_RADIUS: f64 = 1.9;
pub const BONE_RADIUS: f64 = 1.2;
pub const BACKGROUND_COLOR: [f64; 3] = [0.07, 0.07, 0.09];
pub const OBJECT_COLOR: [f64; 3] = [0.16, 0.60, 0.24];

/// What the nearest surface at a pixel belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Background,
    Object,
    Hand { hand: usize, joint: usize },
}

pub fn joint_color(hand: usize, joint: usize) -> [f64; 3] {
    let j = joint as f64;
    if hand == 0 {
        [0.55 + 0.02 * j, 0.10 + 0.03 * j, 0.12]
    } else {
        [0.12, 0.10 + 0.03 * j, 0.55 + 0.02 * j]
    }
}

fn bone_color(hand: usize, child_joint: usize) -> [f64; 3] {
    let c = joint_color(hand, child_joint);
    [0.75 * c[0], 0.75 * c[1], 0.75 * c[2]]
}

struct Raster {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    owner: Vec<Owner>,
}

impl Raster {
    fn new() -> Self {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        Raster {
            color: vec![BACKGROUND_COLOR; n],
            depth: vec![f64::INFINITY; n],
            owner: vec![Owner::Background; n],
        }
    }

    fn put(&mut self, x: usize, y: usize, z: f64, color: [f64; 3], owner: Owner) {
        let i = y * IMAGE_SIZE + x;
        if z < self.depth[i] {
            self.depth[i] = z;
            self.color[i] = color;
            self.owner[i] = owner;
        }
    }

    fn disk(&mut self, cu: f64, cv: f64, r: f64, z: f64, color: [f64; 3], owner: Owner) {
        let (x0, x1) = pixel_span(cu, r);
        let (y0, y1) = pixel_span(cv, r);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let du = x as f64 - cu;
                let dv = y as f64 - cv;
                if du * du + dv * dv <= r * r {
                    self.put(x, y, z, color, owner);
                }
            }
        }
    }

    fn capsule(
        &mut self,
        a: [f64; 2],
        za: f64,
        b: [f64; 2],
        zb: f64,
        r: f64,
        color: [f64; 3],
        owner: Owner,
    ) {
        let (x0, x1) = pixel_span_pair(a[0], b[0], r);
        let (y0, y1) = pixel_span_pair(a[1], b[1], r);
        let seg = [b[0] - a[0], b[1] - a[1]];
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64 - a[0], y as f64 - a[1]];
                let t = if len2 > 0.0 {
                    ((p[0] * seg[0] + p[1] * seg[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = p[0] - t * seg[0];
                let dy = p[1] - t * seg[1];
                if dx * dx + dy * dy <= r * r {
                    self.put(x, y, za + t * (zb - za), color, owner);
                }
            }
        }
    }

    fn hull(&mut self, hull: &[[f64; 2]], z: f64, color: [f64; 3], owner: Owner) {
        if hull.len() < 3 {
            return;
        }
        let (mut umin, mut umax, mut vmin, mut vmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in hull {
            umin = umin.min(p[0]);
            umax = umax.max(p[0]);
            vmin = vmin.min(p[1]);
            vmax = vmax.max(p[1]);
        }
        let (x0, x1) = clamp_span(umin, umax);
        let (y0, y1) = clamp_span(vmin, vmax);
        if x0 > x1 || y0 > y1 {
            return;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                if point_in_hull(hull, &[x as f64, y as f64]) {
                    self.put(x, y, z, color, owner);
                }
            }
        }
    }
}

fn pixel_span(c: f64, r: f64) -> (usize, usize) {
    clamp_span(c - r, c + r)
}

fn pixel_span_pair(a: f64, b: f64, r: f64) -> (usize, usize) {
    clamp_span(a.min(b) - r, a.max(b) + r)
}

fn clamp_span(lo: f64, hi: f64) -> (usize, usize) {
    let lo = lo.floor().max(0.0) as usize;
    let hi = hi.ceil().min(IMAGE_SIZE as f64 - 1.0);
    if hi < 0.0 {
        (1, 0) // empty
    } else {
        (lo.min(IMAGE_SIZE - 1), hi as usize)
    }
}

/// Monotone-chain convex hull; returns vertices in counter-clockwise order.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| a == b);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn point_in_hull(hull: &[[f64; 2]], p: &[f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = &hull[i];
        let b = &hull[(i + 1) % hull.len()];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    true
}

fn rasterize(scene: &Scene) -> Raster {
    let mut r = Raster::new();

    // object footprint: convex hull of the posed corners, constant depth
    let posed = scene.posed_corners();
    if posed.iter().all(|c| c[2] > 1.0) {
        let projected: Vec<[f64; 2]> = posed.iter().map(|c| scene.project(c)).collect();
        let hull = convex_hull(&projected);
        let z = posed.iter().map(|c| c[2]).sum::<f64>() / 8.0;
        r.hull(&hull, z, OBJECT_COLOR, Owner::Object);
    }

    for h in 0..NUM_HANDS {
        if !scene.hand_present[h] {
            continue;
        }
        for (a, b) in bone_pairs() {
            let pa = scene.joints2d[h][a];
            let pb = scene.joints2d[h][b];
            r.capsule(
                pa,
                scene.joints3d[h][a][2],
                pb,
                scene.joints3d[h][b][2],
                BONE_RADIUS,
                bone_color(h, b),
                Owner::Hand { hand: h, joint: b },
            );
        }
        for j in 0..NUM_JOINTS {
            let [u, v] = scene.joints2d[h][j];
            r.disk(
                u,
                v,
                JOINT_RADIUS,
                scene.joints3d[h][j][2],
                joint_color(h, j),
                Owner::Hand { hand: h, joint: j },
            );
        }
    }
    r
}

/// Render to a [64, 64, 3] image with values in [0, 1].
pub fn render(scene: &Scene) -> Tensor {
    let raster = rasterize(scene);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for c in raster.color {
        data.extend_from_slice(&c);
    }
    Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], data)
}

/// Per-pixel nearest-surface owner, row-major.
pub fn render_owner(scene: &Scene) -> Vec<Owner> {
    rasterize(scene).owner
}

/// Segmentation class per owner: background 0, left hand 1, right hand 2,
/// object 3.
pub fn owner_class(o: Owner) -> usize {
    match o {
        Owner::Background => 0,
        Owner::Hand { hand, .. } => 1 + hand,
        Owner::Object => 3,
    }
}

/// Ground-truth segmentation on the 32x32 grid: majority class over each
/// 2x2 image block, ties broken toward the smaller class index.
pub fn gt_segmentation(scene: &Scene) -> Vec<usize> {
    let owners = render_owner(scene);
    let g = crate::GRID;
    let mut out = vec![0usize; g * g];
    for gy in 0..g {
        for gx in 0..g {
            let mut counts = [0usize; 4];
            for dy in 0..2 {
                for dx in 0..2 {
                    let o = owners[(2 * gy + dy) * IMAGE_SIZE + 2 * gx + dx];
                    counts[owner_class(o)] += 1;
                }
            }
            let mut best = 0;
            for c in 1..4 {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            out[gy * g + gx] = best;
        }
    }
    out
}
