//! Training objectives: heatmap L2, identity cross-entropy, relative
//! translation L1, hand-pose L1 and the symmetry-aware object corner loss,
//! combined into an (optionally weighted, default unweighted) total.
//!
//! Each loss exists twice: a plain-value function used by tests and
//! evaluation, and a tape builder used during training. The plain versions
//! double as loop oracles for the tape versions.

use crate::error::{Error, Result};
use crate::mat3::{self, Mat3, Vec3};
use crate::tape::{Tape, Var};
use crate::tensor::{same_shape, Tensor};

/// Per-term values of one training step. `total` is the weighted sum; with
/// the default unit weights it equals the plain sum of the five terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub l_heatmap: f64,
    pub l_joints: f64,
    pub l_translation: f64,
    pub l_hand_pose: f64,
    pub l_object_pose: f64,
    pub total: f64,
}

/// Per-term weights for the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub heatmap: f64,
    pub joints: f64,
    pub translation: f64,
    pub hand_pose: f64,
    pub object_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { heatmap: 1.0, joints: 1.0, translation: 1.0, hand_pose: 1.0, object_pose: 1.0 }
    }
}

impl LossBreakdown {
    pub fn from_terms(
        w: &LossWeights,
        l_heatmap: f64,
        l_joints: f64,
        l_translation: f64,
        l_hand_pose: f64,
        l_object_pose: f64,
    ) -> Self {
        LossBreakdown {
            l_heatmap,
            l_joints,
            l_translation,
            l_hand_pose,
            l_object_pose,
            total: w.heatmap * l_heatmap
                + w.joints * l_joints
                + w.translation * l_translation
                + w.hand_pose * l_hand_pose
                + w.object_pose * l_object_pose,
        }
    }
}

// ── Plain-value losses ───────────────────────────────────────────────

/// Sum of squared differences over every joint map.
pub fn heatmap_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean cross-entropy of per-token class distributions against labels.
/// `probs` rows must sum to 1.
pub fn identity_loss(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        total -= p[l].max(1e-300).ln();
    }
    total / probs.len() as f64
}

/// L1 norm of the difference between two 3-vectors.
pub fn translation_loss(pred: &Vec3, gt: &Vec3) -> f64 {
    (0..3).map(|i| (pred[i] - gt[i]).abs()).sum()
}

/// Mean absolute error over root-relative joint coordinates of the present
/// hands. `present` masks out absent hands.
pub fn hand_pose_loss(
    pred: &[[[f64; 3]; crate::NUM_JOINTS]; crate::NUM_HANDS],
    gt: &[[[f64; 3]; crate::NUM_JOINTS]; crate::NUM_HANDS],
    present: &[bool; crate::NUM_HANDS],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..crate::NUM_HANDS {
        if !present[h] {
            continue;
        }
        for j in 0..crate::NUM_JOINTS {
            for c in 0..3 {
                sum += (pred[h][j][c] - gt[h][j][c]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Symmetry-aware corner loss: minimum over the listed symmetries of the
/// mean Euclidean corner distance between the predicted and ground-truth
/// posed boxes.
pub fn object_corner_loss(
    r_pred: &Mat3,
    t_pred: &Vec3,
    r_gt: &Mat3,
    t_gt: &Vec3,
    corners: &[[f64; 3]; 8],
    symmetries: &[Mat3],
) -> Result<f64> {
    if symmetries.is_empty() {
        return Err(Error::Contract("symmetry set must contain at least the identity".into()));
    }
    let mut best = f64::INFINITY;
    for s in symmetries {
        let mut sum = 0.0;
        for c in corners {
            let p = mat3::add(&mat3::apply(r_pred, &mat3::apply(s, c)), t_pred);
            let g = mat3::add(&mat3::apply(r_gt, c), t_gt);
            sum += mat3::dist(&p, &g);
        }
        best = best.min(sum / corners.len() as f64);
    }
    Ok(best)
}

/// Index of the symmetry minimizing the corner loss; used to freeze the
/// discrete choice before building the differentiable branch.
pub fn best_symmetry_index(
    r_pred: &Mat3,
    t_pred: &Vec3,
    r_gt: &Mat3,
    t_gt: &Vec3,
    corners: &[[f64; 3]; 8],
    symmetries: &[Mat3],
) -> Result<usize> {
    if symmetries.is_empty() {
        return Err(Error::Contract("symmetry set must contain at least the identity".into()));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, s) in symmetries.iter().enumerate() {
        let v = object_corner_loss(r_pred, t_pred, r_gt, t_gt, corners, std::slice::from_ref(s))?;
        if v < best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

// ── Tape builders ────────────────────────────────────────────────────

/// Tape version of [`heatmap_loss`].
pub fn heatmap_loss_t(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum_all(sq))
}

/// Mean cross-entropy from logits [m, k] and per-token labels.
pub fn identity_loss_t(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax_last(logits);
    let picked = tape.gather_elems(ls, labels.to_vec())?;
    let mean = tape.mean_all(picked);
    Ok(tape.neg(mean))
}

/// L1 over a difference vector.
pub fn l1_sum_t(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.sum_all(a))
}

/// Masked mean-L1: mask entries are 1 for coordinates that count.
pub fn masked_mean_l1_t(tape: &mut Tape, pred: Var, gt: Var, mask: Var, n_active: usize) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    let m = tape.mul(a, mask)?;
    let s = tape.sum_all(m);
    Ok(tape.scale(s, 1.0 / n_active.max(1) as f64))
}

/// Mean corner distance for one fixed symmetry. `sym_corners` are the
/// rest-pose corners already mapped by the chosen symmetry; `gt_posed` are
/// the ground-truth posed corners. Both [8, 3] inputs.
pub fn corner_loss_t(
    tape: &mut Tape,
    rotation: Var,
    translation: Var,
    sym_corners: Var,
    gt_posed: Var,
) -> Result<Var> {
    let rt = tape.transpose(rotation)?;
    let moved = tape.matmul(sym_corners, rt)?;
    let moved = tape.add_bias(moved, translation)?;
    let d = tape.sub(moved, gt_posed)?;
    let sq = tape.mul(d, d)?;
    let row = tape.sum_rows(sq)?;
    let dist = tape.sqrt_eps(row, 1e-18);
    Ok(tape.mean_all(dist))
}
