//! Evaluation protocol: MPJPE, MRRPE, MSSD, joint-error AUC, and the
//! scale+translation / Procrustes alignment variants applied before joint
//! errors.

use crate::error::{Error, Result};
use crate::mat3::{self, Mat3, Vec3};
use nalgebra::Matrix3;

/// Mean per-joint position error between two equally sized joint sets.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Dim(format!(
            "mpjpe joint counts {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| mat3::dist(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Error of the right-root-relative-to-left-root vector.
pub fn mrrpe(
    left_root_pred: &Vec3,
    right_root_pred: &Vec3,
    left_root_gt: &Vec3,
    right_root_gt: &Vec3,
) -> f64 {
    let rel_pred = mat3::sub(right_root_pred, left_root_pred);
    let rel_gt = mat3::sub(right_root_gt, left_root_gt);
    mat3::dist(&rel_pred, &rel_gt)
}

/// Maximum symmetry-aware surface distance: min over symmetries of the
/// worst vertex error between the predicted pose and the symmetry-adjusted
/// ground-truth pose.
pub fn mssd(
    r_pred: &Mat3,
    t_pred: &Vec3,
    r_gt: &Mat3,
    t_gt: &Vec3,
    vertices: &[[f64; 3]],
    symmetries: &[Mat3],
) -> Result<f64> {
    if vertices.is_empty() {
        return Err(Error::Contract("mssd requires a non-empty vertex set".into()));
    }
    if symmetries.is_empty() {
        return Err(Error::Contract("mssd requires at least the identity symmetry".into()));
    }
    let mut best = f64::INFINITY;
    for s in symmetries {
        let mut worst: f64 = 0.0;
        for v in vertices {
            let p = mat3::add(&mat3::apply(r_pred, v), t_pred);
            let g = mat3::add(&mat3::apply(r_gt, &mat3::apply(s, v)), t_gt);
            worst = worst.max(mat3::dist(&p, &g));
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Result of fitting an alignment transform.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: Vec<[f64; 3]>,
    /// Set when a degenerate input forced a fallback (zero-variance scale
    /// fit, collinear Procrustes).
    pub degenerate: bool,
}

fn centroid(pts: &[[f64; 3]]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in pts {
        c = mat3::add(&c, p);
    }
    mat3::scale(&c, 1.0 / pts.len() as f64)
}

/// Least-squares uniform scale + translation minimizing
/// sum ||s*p + t - g||^2 over s >= 0. The nonnegativity keeps the family
/// reflection-free and nested inside the Procrustes family. Zero-variance
/// predictions fall back to a pure translation with the degenerate flag set.
pub fn align_scale_translation(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Alignment> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::Dim(format!(
            "alignment needs >= 2 matched joints, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let pc = centroid(pred);
    let gc = centroid(gt);
    let mut cov = 0.0;
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = mat3::sub(p, &pc);
        let dg = mat3::sub(g, &gc);
        cov += mat3::dot(&dp, &dg);
        var += mat3::dot(&dp, &dp);
    }
    let (s, degenerate) = if var > 1e-18 { ((cov / var).max(0.0), false) } else { (1.0, true) };
    let aligned = pred
        .iter()
        .map(|p| mat3::add(&mat3::scale(&mat3::sub(p, &pc), s), &gc))
        .collect();
    Ok(Alignment { aligned, degenerate })
}

/// Orthogonal Procrustes similarity alignment (rotation restricted to
/// det +1, plus scale and translation). Collinear inputs fall back to
/// scale+translation with the degenerate flag set.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Alignment> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(Error::Dim(format!(
            "procrustes needs >= 3 matched joints, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let pc = centroid(pred);
    let gc = centroid(gt);
    let n = pred.len() as f64;
    // cross-covariance of target against source
    let mut sigma = Matrix3::<f64>::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = mat3::sub(p, &pc);
        let dg = mat3::sub(g, &gc);
        for i in 0..3 {
            for j in 0..3 {
                sigma[(i, j)] += dg[i] * dp[j] / n;
            }
        }
        var_p += mat3::dot(&dp, &dp) / n;
    }
    let svd = sigma.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // collinear clouds leave the rotation about the line unconstrained
    let scale_ref = sv[0].max(1e-300);
    if sv[1] / scale_ref < 1e-9 || var_p < 1e-18 {
        let mut fallback = align_scale_translation(pred, gt)?;
        fallback.degenerate = true;
        return Ok(fallback);
    }
    let mut d = Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let trace_ds = sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)];
    let s = trace_ds / var_p;
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = r[(i, j)];
        }
    }
    let aligned = pred
        .iter()
        .map(|p| {
            let centered = mat3::sub(p, &pc);
            mat3::add(&mat3::scale(&mat3::apply(&rot, &centered), s), &gc)
        })
        .collect();
    Ok(Alignment { aligned, degenerate: false })
}

/// Residual sum of squares between joint sets; the quantity all alignments
/// minimize.
pub fn residual_sq(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| {
        let d = mat3::sub(x, y);
        mat3::dot(&d, &d)
    }).sum()
}

/// Area under the PCK curve: fraction of errors at or below each threshold,
/// trapezoidal over `steps` equal intervals on [0, max_threshold],
/// normalized to [0, 1].
pub fn auc_joint_error(errors: &[f64], max_threshold: f64, steps: usize) -> f64 {
    assert!(max_threshold > 0.0 && steps > 0);
    if errors.is_empty() {
        return 0.0;
    }
    let n = errors.len() as f64;
    let pck = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / n;
    let h = max_threshold / steps as f64;
    let mut area = 0.0;
    for i in 0..steps {
        let a = pck(i as f64 * h);
        let b = pck((i + 1) as f64 * h);
        area += 0.5 * (a + b) * h;
    }
    area / max_threshold
}
