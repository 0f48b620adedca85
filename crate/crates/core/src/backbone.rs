//! Convolutional backbone: feature extraction, per-joint heatmaps, object
//! segmentation and object-point sampling.
//!
//! Four 3x3 conv blocks stand in for a large pyramid network: two stride-2
//! stages, one stage at quarter resolution, then a 2x upsample fused with a
//! lateral skip from the half-resolution stage. The output feature map F is
//! always 32x32xC so it lines up with the heatmap grid.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{GRID, IMAGE_SIZE, NUM_HANDS, NUM_JOINTS};

pub const NUM_HEATMAPS: usize = NUM_HANDS * NUM_JOINTS;
pub const NUM_SEG_CLASSES: usize = 4;
/// Segmentation class index of the object.
pub const SEG_OBJECT: usize = 3;

#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub conv3_w: ParamId,
    pub conv3_b: ParamId,
    pub conv4_w: ParamId,
    pub conv4_b: ParamId,
    pub heat_w: ParamId,
    pub heat_b: ParamId,
    pub seg_w: ParamId,
    pub seg_b: ParamId,
}

impl BackboneIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng, channels: usize) -> Self {
        let ch = channels;
        let half = ch / 2;
        let conv = |ps: &mut ParamSet, rng: &mut Rng, name: &str, k: usize, ci: usize, co: usize| {
            ps.add_uniform(name, &[k, k, ci, co], k * k * ci, rng)
        };
        BackboneIds {
            conv1_w: conv(ps, rng, "backbone.conv1.w", 3, 3, half),
            conv1_b: ps.add("backbone.conv1.b", Tensor::zeros(&[half])),
            conv2_w: conv(ps, rng, "backbone.conv2.w", 3, half, ch),
            conv2_b: ps.add("backbone.conv2.b", Tensor::zeros(&[ch])),
            conv3_w: conv(ps, rng, "backbone.conv3.w", 3, ch, ch),
            conv3_b: ps.add("backbone.conv3.b", Tensor::zeros(&[ch])),
            conv4_w: conv(ps, rng, "backbone.conv4.w", 3, ch + half, ch),
            conv4_b: ps.add("backbone.conv4.b", Tensor::zeros(&[ch])),
            // background-prior bias: maps start near the mostly-zero target
            // instead of walking the sigmoid into its dead tail
            heat_w: conv(ps, rng, "backbone.heat.w", 1, ch, NUM_HEATMAPS),
            heat_b: ps.add("backbone.heat.b", Tensor::full(&[NUM_HEATMAPS], -2.2)),
            seg_w: conv(ps, rng, "backbone.seg.w", 1, ch, NUM_SEG_CLASSES),
            seg_b: ps.add("backbone.seg.b", Tensor::zeros(&[NUM_SEG_CLASSES])),
        }
    }
}

/// Image [64, 64, 3] -> feature map [32, 32, C].
pub fn extract_features(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &BackboneIds,
    image: Var,
) -> Result<Var> {
    if tape.data(image).shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] {
        return Err(Error::Dim(format!(
            "expected image [{IMAGE_SIZE}, {IMAGE_SIZE}, 3], got {:?}",
            tape.data(image).shape()
        )));
    }
    let conv_block = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId, stride: usize| -> Result<Var> {
        let wv = tape.param(ps, w);
        let bv = tape.param(ps, b);
        let y = tape.conv2d(x, wv, stride)?;
        let y = tape.add_bias(y, bv)?;
        Ok(tape.relu(y))
    };
    let s1 = conv_block(tape, image, ids.conv1_w, ids.conv1_b, 2)?; // 32x32
    let s2 = conv_block(tape, s1, ids.conv2_w, ids.conv2_b, 2)?; // 16x16
    let s3 = conv_block(tape, s2, ids.conv3_w, ids.conv3_b, 1)?; // 16x16
    let up = tape.upsample2x(s3)?; // 32x32
    let lateral = tape.concat_channels(up, s1)?;
    let f = conv_block(tape, lateral, ids.conv4_w, ids.conv4_b, 1)?;
    tape.tag(f, "backbone.features");
    debug_assert_eq!(&tape.data(f).shape()[..2], &[GRID, GRID]);
    Ok(f)
}

/// Feature map -> [32, 32, 42] heatmaps in [0, 1].
pub fn predict_heatmaps(tape: &mut Tape, ps: &ParamSet, ids: &BackboneIds, f: Var) -> Result<Var> {
    let w = tape.param(ps, ids.heat_w);
    let b = tape.param(ps, ids.heat_b);
    let y = tape.conv2d(f, w, 1)?;
    let y = tape.add_bias(y, b)?;
    let y = tape.sigmoid(y);
    tape.tag(y, "backbone.heatmaps");
    Ok(y)
}

/// Feature map -> [32, 32, 4] per-pixel class distribution.
pub fn predict_segmentation(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &BackboneIds,
    f: Var,
) -> Result<Var> {
    let w = tape.param(ps, ids.seg_w);
    let b = tape.param(ps, ids.seg_b);
    let y = tape.conv2d(f, w, 1)?;
    let y = tape.add_bias(y, b)?;
    let y = tape.softmax_last(y);
    tape.tag(y, "backbone.segmentation");
    Ok(y)
}

/// Pixel locations the object tokens are drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectPointSet {
    /// (x, y) grid coordinates, row-major sorted.
    pub points: Vec<(usize, usize)>,
    /// True when no pixel classified as object and the centroid fallback
    /// was used.
    pub degenerate: bool,
}

/// Sample 20 pixels from the predicted object mask: without replacement
/// when at least 20 object pixels exist, with replacement when fewer, and
/// 20 copies of the mask centroid when there are none.
pub fn sample_object_points(mask: &Tensor, seed: u64) -> ObjectPointSet {
    assert_eq!(mask.shape(), [GRID, GRID, NUM_SEG_CLASSES]);
    let n = crate::NUM_OBJECT_POINTS;
    let mut object_pixels = Vec::new();
    for y in 0..GRID {
        for x in 0..GRID {
            let mut best = 0;
            for c in 1..NUM_SEG_CLASSES {
                if mask.at3(y, x, c) > mask.at3(y, x, best) {
                    best = c;
                }
            }
            if best == SEG_OBJECT {
                object_pixels.push((x, y));
            }
        }
    }
    let mut rng = Rng::from_seed(seed);
    let mut points: Vec<(usize, usize)>;
    let mut degenerate = false;
    if object_pixels.len() >= n {
        let picks = rng.sample_without_replacement(object_pixels.len(), n);
        points = picks.into_iter().map(|i| object_pixels[i]).collect();
    } else if !object_pixels.is_empty() {
        points = (0..n).map(|_| object_pixels[rng.below(object_pixels.len())]).collect();
    } else {
        // centroid of the object-probability mass
        let mut wsum = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for y in 0..GRID {
            for x in 0..GRID {
                let w = mask.at3(y, x, SEG_OBJECT);
                wsum += w;
                cx += w * x as f64;
                cy += w * y as f64;
            }
        }
        let (px, py) = if wsum > 0.0 {
            ((cx / wsum).round() as usize, (cy / wsum).round() as usize)
        } else {
            (GRID / 2, GRID / 2)
        };
        points = vec![(px.min(GRID - 1), py.min(GRID - 1)); n];
        degenerate = true;
    }
    points.sort_by_key(|&(x, y)| (y, x));
    ObjectPointSet { points, degenerate }
}

/// Ground-truth heatmaps: one isotropic Gaussian (peak value 1) per active
/// joint, all-zero maps for inactive or out-of-frame joints. Joint
/// coordinates are on the 32x32 grid.
pub fn render_gt_heatmaps(joints_grid: &[[f64; 2]], active: &[bool], sigma: f64) -> Tensor {
    assert_eq!(joints_grid.len(), NUM_HEATMAPS);
    assert_eq!(active.len(), NUM_HEATMAPS);
    let mut out = Tensor::zeros(&[GRID, GRID, NUM_HEATMAPS]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let g = GRID as f64;
    for (j, ([u, v], &on)) in joints_grid.iter().zip(active).enumerate() {
        if !on || *u < 0.0 || *u >= g || *v < 0.0 || *v >= g {
            continue;
        }
        for y in 0..GRID {
            for x in 0..GRID {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                out.data_mut()[(y * GRID + x) * NUM_HEATMAPS + j] = (-d2 * inv).exp();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng::Rng;

    fn tiny_backbone(channels: usize, seed: u64) -> (ParamSet, BackboneIds) {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(seed);
        let ids = BackboneIds::init(&mut ps, &mut rng, channels);
        (ps, ids)
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let (ps, ids) = tiny_backbone(8, 1);
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE, 3]));
        let f = extract_features(&mut tape, &ps, &ids, img).unwrap();
        assert!(tape.data(f).is_finite());
    }

    #[test]
    fn default_config_feature_shape_is_32x32x64() {
        let cfg = RunConfig::default();
        let (ps, ids) = tiny_backbone(cfg.channels, 2);
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE, 3]));
        let f = extract_features(&mut tape, &ps, &ids, img).unwrap();
        assert_eq!(tape.data(f).shape(), &[GRID, GRID, 64]);
    }

    #[test]
    fn wrong_image_shape_is_dimension_error() {
        let (ps, ids) = tiny_backbone(8, 3);
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[16, 16, 3]));
        assert!(matches!(
            extract_features(&mut tape, &ps, &ids, img),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn single_pixel_change_perturbs_features() {
        let (ps, ids) = tiny_backbone(8, 4);
        let mut img = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE, 3]);
        let mut tape = Tape::new();
        let a = tape.input(img.clone());
        let fa = extract_features(&mut tape, &ps, &ids, a).unwrap();
        img.data_mut()[(30 * IMAGE_SIZE + 30) * 3] = 1.0;
        let b = tape.input(img);
        let fb = extract_features(&mut tape, &ps, &ids, b).unwrap();
        let diff: f64 = tape
            .data(fa)
            .data()
            .iter()
            .zip(tape.data(fb).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "feature maps identical after pixel change");
    }

    #[test]
    fn heatmap_head_shape_and_range() {
        let (ps, ids) = tiny_backbone(8, 5);
        let mut tape = Tape::new();
        let mut r = Rng::from_seed(6);
        let img = tape.input(Tensor::new(
            vec![IMAGE_SIZE, IMAGE_SIZE, 3],
            (0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|_| r.uniform()).collect(),
        ));
        let f = extract_features(&mut tape, &ps, &ids, img).unwrap();
        let h = predict_heatmaps(&mut tape, &ps, &ids, f).unwrap();
        assert_eq!(tape.data(h).shape(), &[GRID, GRID, NUM_HEATMAPS]);
        assert!(tape.data(h).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn untrained_heatmaps_are_near_uniform() {
        let (ps, ids) = tiny_backbone(8, 7);
        let mut tape = Tape::new();
        let mut r = Rng::from_seed(8);
        let img = tape.input(Tensor::new(
            vec![IMAGE_SIZE, IMAGE_SIZE, 3],
            (0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|_| r.uniform()).collect(),
        ));
        let f = extract_features(&mut tape, &ps, &ids, img).unwrap();
        let h = predict_heatmaps(&mut tape, &ps, &ids, f).unwrap();
        let data = tape.data(h).data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let std =
            (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64).sqrt();
        assert!(std < 0.25, "untrained heatmap std {std} too peaky");
    }

    #[test]
    fn segmentation_rows_sum_to_one() {
        let (ps, ids) = tiny_backbone(8, 9);
        let mut tape = Tape::new();
        let img = tape.input(Tensor::full(&[IMAGE_SIZE, IMAGE_SIZE, 3], 0.3));
        let f = extract_features(&mut tape, &ps, &ids, img).unwrap();
        let s = predict_segmentation(&mut tape, &ps, &ids, f).unwrap();
        assert_eq!(tape.data(s).shape(), &[GRID, GRID, NUM_SEG_CLASSES]);
        for px in tape.data(s).data().chunks(NUM_SEG_CLASSES) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn mask_with_object_pixels(pixels: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros(&[GRID, GRID, NUM_SEG_CLASSES]);
        for y in 0..GRID {
            for x in 0..GRID {
                m.data_mut()[(y * GRID + x) * NUM_SEG_CLASSES] = 1.0; // background
            }
        }
        for &(x, y) in pixels {
            let base = (y * GRID + x) * NUM_SEG_CLASSES;
            m.data_mut()[base] = 0.0;
            m.data_mut()[base + SEG_OBJECT] = 1.0;
        }
        m
    }

    #[test]
    fn sampling_large_mask_gives_distinct_object_points() {
        let pixels: Vec<(usize, usize)> =
            (0..20).flat_map(|y| (0..20).map(move |x| (x, y))).collect();
        let mask = mask_with_object_pixels(&pixels);
        let got = sample_object_points(&mask, 3);
        assert_eq!(got.points.len(), 20);
        assert!(!got.degenerate);
        let mut uniq = got.points.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 20, "points must be distinct");
        assert!(got.points.iter().all(|p| pixels.contains(p)));
    }

    #[test]
    fn sampling_small_mask_reuses_pixels() {
        let pixels = [(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)];
        let mask = mask_with_object_pixels(&pixels);
        let got = sample_object_points(&mask, 3);
        assert_eq!(got.points.len(), 20);
        assert!(!got.degenerate);
        assert!(got.points.iter().all(|p| pixels.contains(p)));
    }

    #[test]
    fn sampling_empty_mask_degenerates_to_centroid() {
        let mask = mask_with_object_pixels(&[]);
        let got = sample_object_points(&mask, 3);
        assert!(got.degenerate);
        assert_eq!(got.points.len(), 20);
        let first = got.points[0];
        assert!(got.points.iter().all(|&p| p == first));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pixels: Vec<(usize, usize)> =
            (5..15).flat_map(|y| (5..15).map(move |x| (x, y))).collect();
        let mask = mask_with_object_pixels(&pixels);
        assert_eq!(sample_object_points(&mask, 11), sample_object_points(&mask, 11));
    }

    #[test]
    fn gt_heatmap_center_peak_is_one() {
        let mut joints = [[f64::NAN; 2]; NUM_HEATMAPS];
        let mut active = [false; NUM_HEATMAPS];
        joints[0] = [16.0, 16.0];
        active[0] = true;
        let h = render_gt_heatmaps(&joints, &active, 1.5);
        assert_eq!(h.at3(16, 16, 0), 1.0);
        let mut best = (0, 0, f64::MIN);
        for y in 0..GRID {
            for x in 0..GRID {
                if h.at3(y, x, 0) > best.2 {
                    best = (x, y, h.at3(y, x, 0));
                }
            }
        }
        assert_eq!((best.0, best.1), (16, 16));
    }

    #[test]
    fn gt_heatmap_outside_frame_is_zero() {
        let mut joints = [[0.0; 2]; NUM_HEATMAPS];
        let mut active = [true; NUM_HEATMAPS];
        joints[3] = [-2.0, 10.0];
        joints[4] = [10.0, 40.0];
        for (j, a) in active.iter_mut().enumerate() {
            *a = j == 3 || j == 4;
        }
        let h = render_gt_heatmaps(&joints, &active, 1.5);
        for y in 0..GRID {
            for x in 0..GRID {
                assert_eq!(h.at3(y, x, 3), 0.0);
                assert_eq!(h.at3(y, x, 4), 0.0);
            }
        }
    }

    #[test]
    fn gt_heatmap_mass_matches_gaussian_integral() {
        // discrete sum of an interior Gaussian approximates 2*pi*sigma^2
        let sigma = 1.5;
        let mut joints = [[0.0; 2]; NUM_HEATMAPS];
        let mut active = [false; NUM_HEATMAPS];
        joints[7] = [15.0, 17.0];
        active[7] = true;
        let h = render_gt_heatmaps(&joints, &active, sigma);
        let sum: f64 = (0..GRID)
            .flat_map(|y| (0..GRID).map(move |x| (x, y)))
            .map(|(x, y)| h.at3(y, x, 7))
            .sum();
        let analytic = 2.0 * std::f64::consts::PI * sigma * sigma;
        assert!(
            (sum - analytic).abs() / analytic < 0.02,
            "mass {sum} vs analytic {analytic}"
        );
    }

    #[test]
    fn gt_heatmap_translation_equivariance() {
        let sigma = 1.5;
        let mut joints = [[0.0; 2]; NUM_HEATMAPS];
        let mut active = [false; NUM_HEATMAPS];
        joints[0] = [10.3, 12.7];
        active[0] = true;
        let a = render_gt_heatmaps(&joints, &active, sigma);
        joints[0] = [13.3, 9.7]; // shift by (+3, -3)
        let b = render_gt_heatmaps(&joints, &active, sigma);
        let argmax = |t: &Tensor| {
            let mut best = (0usize, 0usize, f64::MIN);
            for y in 0..GRID {
                for x in 0..GRID {
                    if t.at3(y, x, 0) > best.2 {
                        best = (x, y, t.at3(y, x, 0));
                    }
                }
            }
            (best.0, best.1)
        };
        let (ax, ay) = argmax(&a);
        let (bx, by) = argmax(&b);
        assert_eq!((bx as isize - ax as isize, by as isize - ay as isize), (3, -3));
    }
}
