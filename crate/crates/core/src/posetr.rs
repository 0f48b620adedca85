//! Keypoint transformer: peak tokenization, combined sigmoid*softmax
//! attention, encoder/decoder stacks, identity classification and 3D pose
//! regression.
//!
//! The gated attention computes C_soft = softmax(q k^T / sqrt(d)) and
//! C_sig = sigmoid(q k^T / sqrt(d)) from the same scores and uses their
//! elementwise product; the sigmoid branch filters spuriously high
//! correlations while preserving 0 <= C <= C_soft row by row. With the
//! sigmoid branch disabled the layer is plain softmax attention.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{BACKGROUND_CLASS, EMBED_DIM, GRID, NUM_IDENTITY_CLASSES, NUM_JOINTS};

// ── Peak extraction ──────────────────────────────────────────────────

/// A detected heatmap local maximum on the 32x32 grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Scan every joint map for strict 8-neighbour local maxima above
/// `threshold`. Peaks from different maps that land on the same pixel are
/// merged (keeping the strongest); the result is row-major ordered and
/// capped at `max_tokens` strongest peaks.
pub fn extract_peaks(heatmaps: &Tensor, threshold: f64, max_tokens: usize) -> Vec<Peak> {
    let shape = heatmaps.shape();
    assert_eq!(shape.len(), 3);
    let (h, w, nmaps) = (shape[0], shape[1], shape[2]);
    let mut best: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for j in 0..nmaps {
        for y in 0..h {
            for x in 0..w {
                let v = heatmaps.at3(y, x, j);
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                'scan: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                            continue;
                        }
                        if heatmaps.at3(ny as usize, nx as usize, j) >= v {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
                if is_max {
                    let slot = best.entry((y, x)).or_insert(f64::NEG_INFINITY);
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    let mut peaks: Vec<Peak> =
        best.into_iter().map(|((y, x), value)| Peak { x, y, value }).collect();
    if peaks.len() > max_tokens {
        peaks.sort_by(|a, b| {
            b.value.partial_cmp(&a.value).unwrap().then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x))
        });
        peaks.truncate(max_tokens);
    }
    peaks.sort_by(|a, b| a.y.cmp(&b.y).then(a.x.cmp(&b.x)));
    peaks
}

// ── Positional encoding ──────────────────────────────────────────────

/// Sinusoidal 2D positional encoding: half the embedding encodes x, half y.
pub fn positional_encoding(x: f64, y: f64) -> Vec<f64> {
    let half = EMBED_DIM / 2;
    let quarter = half / 2;
    let mut pe = vec![0.0; EMBED_DIM];
    for i in 0..quarter {
        let freq = 1.0 / 100.0f64.powf(i as f64 / quarter as f64);
        pe[2 * i] = (x * freq).sin();
        pe[2 * i + 1] = (x * freq).cos();
        pe[half + 2 * i] = (y * freq).sin();
        pe[half + 2 * i + 1] = (y * freq).cos();
    }
    pe
}

// ── Attention layers ─────────────────────────────────────────────────

/// Combined sigmoid*softmax attention on projected q, k, v. Shapes are
/// q: [mq, d], k/v: [mkv, d]. With `use_sigmoid` false this is exactly
/// softmax attention.
pub fn combined_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    use_sigmoid: bool,
) -> Result<Var> {
    let dq = tape.data(q).shape().to_vec();
    let dk = tape.data(k).shape().to_vec();
    let dv = tape.data(v).shape().to_vec();
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
        return Err(Error::Dim(format!("attention q {dq:?} vs k {dk:?}")));
    }
    if dv.len() != 2 || dv[0] != dk[0] {
        return Err(Error::Dim(format!("attention k {dk:?} vs v {dv:?}")));
    }
    let kt = tape.transpose(k)?;
    let scores_raw = tape.matmul(q, kt)?;
    let scores = tape.scale(scores_raw, 1.0 / (dq[1] as f64).sqrt());
    let c_soft = tape.softmax_last(scores);
    let c = if use_sigmoid {
        let c_sig = tape.sigmoid(scores);
        tape.mul(c_soft, c_sig)?
    } else {
        c_soft
    };
    tape.matmul(c, v)
}

#[derive(Clone, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnIds {
    fn init(ps: &mut ParamSet, rng: &mut Rng, prefix: &str) -> Self {
        let d = EMBED_DIM;
        let lin = |ps: &mut ParamSet, rng: &mut Rng, name: String| {
            ps.add_uniform(&name, &[d, d], d, rng)
        };
        AttnIds {
            wq: lin(ps, rng, format!("{prefix}.wq")),
            bq: ps.add(&format!("{prefix}.bq"), Tensor::zeros(&[d])),
            wk: lin(ps, rng, format!("{prefix}.wk")),
            bk: ps.add(&format!("{prefix}.bk"), Tensor::zeros(&[d])),
            wv: lin(ps, rng, format!("{prefix}.wv")),
            bv: ps.add(&format!("{prefix}.bv"), Tensor::zeros(&[d])),
            wo: lin(ps, rng, format!("{prefix}.wo")),
            bo: ps.add(&format!("{prefix}.bo"), Tensor::zeros(&[d])),
        }
    }
}

/// Extract head `h` of `heads` from [m, d]: columns h*dh .. (h+1)*dh.
fn head_slice(tape: &mut Tape, x: Var, h: usize, heads: usize) -> Result<Var> {
    let m = tape.data(x).shape()[0];
    let d = tape.data(x).shape()[1];
    let dh = d / heads;
    let xt = tape.transpose(x)?; // [d, m], rows contiguous
    let seg = tape.slice_flat(xt, h * dh * m, dh * m)?;
    let seg = tape.concat_flat(&[seg], vec![dh, m])?;
    tape.transpose(seg) // [m, dh]
}

/// Full attention sub-block: project, (multi-head) combined attention,
/// output projection.
pub fn attention_block(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &AttnIds,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    use_sigmoid: bool,
) -> Result<Var> {
    let project = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let wv = tape.param(ps, w);
        let bv = tape.param(ps, b);
        let y = tape.matmul(x, wv)?;
        tape.add_bias(y, bv)
    };
    let q = project(tape, x_q, ids.wq, ids.bq)?;
    let k = project(tape, x_kv, ids.wk, ids.bk)?;
    let v = project(tape, x_kv, ids.wv, ids.bv)?;

    let attn = if heads <= 1 {
        combined_attention(tape, q, k, v, use_sigmoid)?
    } else {
        let mq = tape.data(q).shape()[0];
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(tape, q, h, heads)?;
            let kh = head_slice(tape, k, h, heads)?;
            let vh = head_slice(tape, v, h, heads)?;
            let oh = combined_attention(tape, qh, kh, vh, use_sigmoid)?;
            parts.push(tape.transpose(oh)?); // [dh, mq]
        }
        let stacked = tape.concat_flat(&parts, vec![EMBED_DIM, mq])?;
        tape.transpose(stacked)?
    };
    project(tape, attn, ids.wo, ids.bo)
}

// ── Encoder / decoder ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncLayerIds {
    pub attn: AttnIds,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

fn layer_norm_ids(ps: &mut ParamSet, name: &str) -> (ParamId, ParamId) {
    (
        ps.add(&format!("{name}.g"), Tensor::full(&[EMBED_DIM], 1.0)),
        ps.add(&format!("{name}.b"), Tensor::zeros(&[EMBED_DIM])),
    )
}

fn ffn_ids(ps: &mut ParamSet, rng: &mut Rng, prefix: &str, width: usize) -> (ParamId, ParamId, ParamId, ParamId) {
    let d = EMBED_DIM;
    (
        ps.add_uniform(&format!("{prefix}.w1"), &[d, width], d, rng),
        ps.add(&format!("{prefix}.b1"), Tensor::zeros(&[width])),
        ps.add_uniform(&format!("{prefix}.w2"), &[width, d], width, rng),
        ps.add(&format!("{prefix}.b2"), Tensor::zeros(&[d])),
    )
}

impl EncLayerIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng, ffn_width: usize, prefix: &str) -> Self {
        let attn = AttnIds::init(ps, rng, &format!("{prefix}.self"));
        let (ln1_g, ln1_b) = layer_norm_ids(ps, &format!("{prefix}.ln1"));
        let (ffn_w1, ffn_b1, ffn_w2, ffn_b2) = ffn_ids(ps, rng, &format!("{prefix}.ffn"), ffn_width);
        let (ln2_g, ln2_b) = layer_norm_ids(ps, &format!("{prefix}.ln2"));
        EncLayerIds { attn, ln1_g, ln1_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_g, ln2_b }
    }
}

#[derive(Clone, Debug)]
pub struct DecLayerIds {
    pub self_attn: AttnIds,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub cross_attn: AttnIds,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln3_g: ParamId,
    pub ln3_b: ParamId,
}

impl DecLayerIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng, ffn_width: usize, prefix: &str) -> Self {
        let self_attn = AttnIds::init(ps, rng, &format!("{prefix}.self"));
        let (ln1_g, ln1_b) = layer_norm_ids(ps, &format!("{prefix}.ln1"));
        let cross_attn = AttnIds::init(ps, rng, &format!("{prefix}.cross"));
        let (ln2_g, ln2_b) = layer_norm_ids(ps, &format!("{prefix}.ln2"));
        let (ffn_w1, ffn_b1, ffn_w2, ffn_b2) = ffn_ids(ps, rng, &format!("{prefix}.ffn"), ffn_width);
        let (ln3_g, ln3_b) = layer_norm_ids(ps, &format!("{prefix}.ln3"));
        DecLayerIds {
            self_attn,
            ln1_g,
            ln1_b,
            cross_attn,
            ln2_g,
            ln2_b,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln3_g,
            ln3_b,
        }
    }
}

const LN_EPS: f64 = 1e-6;

fn ffn_forward(
    tape: &mut Tape,
    ps: &ParamSet,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    x: Var,
) -> Result<Var> {
    let w1v = tape.param(ps, w1);
    let b1v = tape.param(ps, b1);
    let h = tape.matmul(x, w1v)?;
    let h = tape.add_bias(h, b1v)?;
    let h = tape.relu(h);
    let w2v = tape.param(ps, w2);
    let b2v = tape.param(ps, b2);
    let y = tape.matmul(h, w2v)?;
    tape.add_bias(y, b2v)
}

fn residual_norm(
    tape: &mut Tape,
    ps: &ParamSet,
    x: Var,
    delta: Var,
    g: ParamId,
    b: ParamId,
) -> Result<Var> {
    let sum = tape.add(x, delta)?;
    let gv = tape.param(ps, g);
    let bv = tape.param(ps, b);
    tape.layer_norm(sum, gv, bv, LN_EPS)
}

/// Encoder stack over a non-empty [m, 256] token matrix.
pub fn encode(
    tape: &mut Tape,
    ps: &ParamSet,
    layers: &[EncLayerIds],
    tokens: Var,
    heads: usize,
    use_sigmoid: bool,
) -> Result<Var> {
    if tape.data(tokens).shape()[0] == 0 {
        return Err(Error::Contract("encoder requires at least one token".into()));
    }
    let mut x = tokens;
    for l in layers {
        let a = attention_block(tape, ps, &l.attn, x, x, heads, use_sigmoid)?;
        let x1 = residual_norm(tape, ps, x, a, l.ln1_g, l.ln1_b)?;
        let f = ffn_forward(tape, ps, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2, x1)?;
        x = residual_norm(tape, ps, x1, f, l.ln2_g, l.ln2_b)?;
    }
    Ok(x)
}

/// Decoder stack: combined self-attention over the learned queries, then
/// cross-attention onto the encoder tokens, then the FFN.
pub fn decode(
    tape: &mut Tape,
    ps: &ParamSet,
    layers: &[DecLayerIds],
    queries: Var,
    enc_tokens: Var,
    heads: usize,
    use_sigmoid: bool,
) -> Result<Var> {
    let mut x = queries;
    for l in layers {
        let a = attention_block(tape, ps, &l.self_attn, x, x, heads, use_sigmoid)?;
        let x1 = residual_norm(tape, ps, x, a, l.ln1_g, l.ln1_b)?;
        let c = attention_block(tape, ps, &l.cross_attn, x1, enc_tokens, heads, use_sigmoid)?;
        let x2 = residual_norm(tape, ps, x1, c, l.ln2_g, l.ln2_b)?;
        let f = ffn_forward(tape, ps, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2, x2)?;
        x = residual_norm(tape, ps, x2, f, l.ln3_g, l.ln3_b)?;
    }
    Ok(x)
}

// ── Identity head ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct IdentityHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl IdentityHeadIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng) -> Self {
        let d = EMBED_DIM;
        IdentityHeadIds {
            w1: ps.add_uniform("ident.w1", &[d, d], d, rng),
            b1: ps.add("ident.b1", Tensor::zeros(&[d])),
            w2: ps.add_uniform("ident.w2", &[d, d], d, rng),
            b2: ps.add("ident.b2", Tensor::zeros(&[d])),
            w_out: ps.add_uniform("ident.w_out", &[d, NUM_IDENTITY_CLASSES], d, rng),
            b_out: ps.add("ident.b_out", Tensor::zeros(&[NUM_IDENTITY_CLASSES])),
        }
    }
}

/// Two-layer MLP + linear projection. Returns (logits, probabilities);
/// probabilities are the per-token softmax over the 44 identity classes.
pub fn predict_identities(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &IdentityHeadIds,
    tokens: Var,
) -> Result<(Var, Var)> {
    let w1 = tape.param(ps, ids.w1);
    let b1 = tape.param(ps, ids.b1);
    let h = tape.matmul(tokens, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(ps, ids.w2);
    let b2 = tape.param(ps, ids.b2);
    let h2 = tape.matmul(h, w2)?;
    let h2 = tape.add_bias(h2, b2)?;
    let h2 = tape.relu(h2);
    let wo = tape.param(ps, ids.w_out);
    let bo = tape.param(ps, ids.b_out);
    let logits = tape.matmul(h2, wo)?;
    let logits = tape.add_bias(logits, bo)?;
    let probs = tape.softmax_last(logits);
    tape.tag(probs, "ident.probs");
    Ok((logits, probs))
}

/// Ground-truth identity assignment for detected peaks: the label of the
/// nearest in-frame ground-truth joint within `gamma` grid pixels, else
/// background. Ties break toward the smallest (hand, joint) pair.
///
/// `gt_joints` holds (class, u, v) with u, v on the 32x32 grid.
pub fn assign_gt_identities(
    peaks: &[Peak],
    gt_joints: &[(usize, f64, f64)],
    gamma: f64,
) -> Vec<usize> {
    peaks
        .iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for &(class, u, v) in gt_joints {
                let d = ((p.x as f64 - u).powi(2) + (p.y as f64 - v).powi(2)).sqrt();
                if d > gamma {
                    continue;
                }
                match best {
                    Some((bd, bc)) if d > bd || (d == bd && class >= bc) => {}
                    _ => best = Some((d, class)),
                }
            }
            best.map(|(_, c)| c).unwrap_or(BACKGROUND_CLASS)
        })
        .collect()
}

/// Class index for (hand, joint).
pub fn hand_joint_class(hand: usize, joint: usize) -> usize {
    hand * NUM_JOINTS + joint
}

// ── Pose head ────────────────────────────────────────────────────────

pub const POSE_OUT_DIM: usize = 126 + 3 + 6 + 3;

#[derive(Clone, Debug)]
pub struct PoseHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl PoseHeadIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng) -> Self {
        let d = EMBED_DIM;
        // bias the 6D rotation slice toward the identity frame
        let mut b_out = Tensor::zeros(&[POSE_OUT_DIM]);
        b_out.data_mut()[129] = 1.0;
        b_out.data_mut()[133] = 1.0;
        PoseHeadIds {
            w1: ps.add_uniform("pose.w1", &[d, d], d, rng),
            b1: ps.add("pose.b1", Tensor::zeros(&[d])),
            w2: ps.add_uniform("pose.w2", &[d, d], d, rng),
            b2: ps.add("pose.b2", Tensor::zeros(&[d])),
            w_out: ps.add_uniform("pose.w_out", &[d, POSE_OUT_DIM], d, rng),
            b_out: ps.add("pose.b_out", b_out),
        }
    }
}

/// Differentiable pose outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    /// Flat [126]: two hands x 21 joints x xyz, absolute head output
    /// (consumers subtract the wrist for root-relative coordinates).
    pub joints: Var,
    /// [3] translation from left wrist to right wrist.
    pub rel_translation: Var,
    /// [3, 3] orthonormal object rotation (det +1).
    pub rotation: Var,
    /// [3] object translation.
    pub obj_translation: Var,
}

fn normalize3(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let n2 = tape.sum_all(sq);
    let n = tape.sqrt_eps(n2, 1e-12);
    tape.div_scalar(x, n)
}

fn cross3(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let el = |tape: &mut Tape, v: Var, i: usize| tape.slice_flat(v, i, 1);
    let (a0, a1, a2) = (el(tape, a, 0)?, el(tape, a, 1)?, el(tape, a, 2)?);
    let (b0, b1, b2) = (el(tape, b, 0)?, el(tape, b, 1)?, el(tape, b, 2)?);
    let t0a = tape.mul(a1, b2)?;
    let t0b = tape.mul(a2, b1)?;
    let c0 = tape.sub(t0a, t0b)?;
    let t1a = tape.mul(a2, b0)?;
    let t1b = tape.mul(a0, b2)?;
    let c1 = tape.sub(t1a, t1b)?;
    let t2a = tape.mul(a0, b1)?;
    let t2b = tape.mul(a1, b0)?;
    let c2 = tape.sub(t2a, t2b)?;
    tape.concat_flat(&[c0, c1, c2], vec![3])
}

/// Gram-Schmidt orthonormalization of a 6D rotation parameterization into a
/// proper rotation matrix (rows r1, r2, r3 = r1 x r2).
pub fn rotation_from_6d(tape: &mut Tape, six: Var) -> Result<Var> {
    let a1 = tape.slice_flat(six, 0, 3)?;
    let a2 = tape.slice_flat(six, 3, 3)?;
    let r1 = normalize3(tape, a1)?;
    let d = tape.mul(r1, a2)?;
    let proj = tape.sum_all(d);
    let pvec = tape.mul_scalar(r1, proj)?;
    let ortho = tape.sub(a2, pvec)?;
    let r2 = normalize3(tape, ortho)?;
    let r3 = cross3(tape, r1, r2)?;
    tape.concat_flat(&[r1, r2, r3], vec![3, 3])
}

/// Regress poses from the decoded queries: mean-pool, two-layer MLP, then a
/// linear readout split into hand joints, relative translation, object
/// rotation (6D -> orthonormalized) and object translation.
pub fn predict_poses(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &PoseHeadIds,
    decoded: Var,
    pose_gain: f64,
) -> Result<PoseVars> {
    let pooled = tape.mean_rows(decoded)?;
    let pooled = tape.concat_flat(&[pooled], vec![1, EMBED_DIM])?;
    let w1 = tape.param(ps, ids.w1);
    let b1 = tape.param(ps, ids.b1);
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(ps, ids.w2);
    let b2 = tape.param(ps, ids.b2);
    let h2 = tape.matmul(h, w2)?;
    let h2 = tape.add_bias(h2, b2)?;
    let h2 = tape.relu(h2);
    let wo = tape.param(ps, ids.w_out);
    let bo = tape.param(ps, ids.b_out);
    let raw = tape.matmul(h2, wo)?;
    let raw = tape.add_bias(raw, bo)?;
    tape.tag(raw, "pose.raw");

    let joints_raw = tape.slice_flat(raw, 0, 126)?;
    let joints = tape.scale(joints_raw, pose_gain);
    let rel_raw = tape.slice_flat(raw, 126, 3)?;
    let rel_translation = tape.scale(rel_raw, pose_gain);
    let six = tape.slice_flat(raw, 129, 6)?;
    let rotation = rotation_from_6d(tape, six)?;
    let obj_raw = tape.slice_flat(raw, 135, 3)?;
    let obj_translation = tape.scale(obj_raw, 3.0 * pose_gain);
    Ok(PoseVars { joints, rel_translation, rotation, obj_translation })
}

/// Plain-value snapshot of the pose outputs.
#[derive(Clone, Debug)]
pub struct PoseOutput {
    /// Root-relative joints per hand (wrist subtracted), [hand][joint][xyz].
    pub joints: [[[f64; 3]; NUM_JOINTS]; crate::NUM_HANDS],
    pub rel_translation: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub obj_translation: [f64; 3],
}

impl PoseOutput {
    pub fn from_vars(tape: &Tape, pose: &PoseVars) -> Self {
        let j = tape.data(pose.joints).data();
        let mut joints = [[[0.0; 3]; NUM_JOINTS]; crate::NUM_HANDS];
        for h in 0..crate::NUM_HANDS {
            let wrist = [j[h * 63], j[h * 63 + 1], j[h * 63 + 2]];
            for k in 0..NUM_JOINTS {
                for c in 0..3 {
                    joints[h][k][c] = j[h * 63 + k * 3 + c] - wrist[c];
                }
            }
        }
        let rel = tape.data(pose.rel_translation).data();
        let rot = tape.data(pose.rotation).data();
        let obj = tape.data(pose.obj_translation).data();
        PoseOutput {
            joints,
            rel_translation: [rel[0], rel[1], rel[2]],
            rotation: [
                [rot[0], rot[1], rot[2]],
                [rot[3], rot[4], rot[5]],
                [rot[6], rot[7], rot[8]],
            ],
            obj_translation: [obj[0], obj[1], obj[2]],
        }
    }
}

/// Token positions on the grid, used to add positional encodings.
pub fn build_positional_input(positions: &[(usize, usize)]) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * EMBED_DIM);
    for &(x, y) in positions {
        data.extend_from_slice(&positional_encoding(x as f64, y as f64));
    }
    Tensor::new(vec![positions.len(), EMBED_DIM], data)
}

/// Grid coordinate sanity for peak positions.
pub fn peak_in_grid(p: &Peak) -> bool {
    p.x < GRID && p.y < GRID
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::sigmoid;

    fn rand_mat(r: &mut Rng, m: usize, d: usize) -> Tensor {
        Tensor::new(vec![m, d], (0..m * d).map(|_| r.range(-1.0, 1.0)).collect())
    }

    // ── extract_peaks ────────────────────────────────────────────────

    fn gaussian_map(cx: f64, cy: f64, peak: f64) -> Tensor {
        let mut t = Tensor::zeros(&[GRID, GRID, 1]);
        for y in 0..GRID {
            for x in 0..GRID {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                t.data_mut()[y * GRID + x] = peak * (-d2 / 4.5).exp();
            }
        }
        t
    }

    #[test]
    fn single_gaussian_yields_one_token() {
        let h = gaussian_map(12.0, 20.0, 0.9);
        let peaks = extract_peaks(&h, 0.5, 64);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (12, 20));
    }

    #[test]
    fn all_zero_maps_yield_no_tokens() {
        let h = Tensor::zeros(&[GRID, GRID, 4]);
        assert!(extract_peaks(&h, 0.5, 64).is_empty());
    }

    #[test]
    fn two_separated_peaks_detected() {
        let mut h = gaussian_map(8.0, 8.0, 0.9);
        let other = gaussian_map(18.0, 8.0, 0.8);
        for (a, b) in h.data_mut().iter_mut().zip(other.data()) {
            *a = a.max(*b);
        }
        let peaks = extract_peaks(&h, 0.5, 64);
        // independent scan: brute-force local maxima over the map
        let mut brute = Vec::new();
        for y in 0..GRID {
            for x in 0..GRID {
                let v = h.at3(y, x, 0);
                if v <= 0.5 {
                    continue;
                }
                let mut ok = true;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                        if nx >= 0
                            && ny >= 0
                            && nx < GRID as i32
                            && ny < GRID as i32
                            && h.at3(ny as usize, nx as usize, 0) >= v
                        {
                            ok = false;
                        }
                    }
                }
                if ok {
                    brute.push((x, y));
                }
            }
        }
        assert_eq!(peaks.len(), brute.len());
        assert_eq!(peaks.len(), 2);
    }

    // ── combined attention ───────────────────────────────────────────

    #[test]
    fn single_token_attention_is_sigmoid_scaled_value() {
        let mut r = Rng::from_seed(1);
        let mut tape = Tape::new();
        let q = tape.input(rand_mat(&mut r, 1, 8));
        let v = tape.input(rand_mat(&mut r, 1, 8));
        let out = combined_attention(&mut tape, q, q, v, true).unwrap();
        let qn: f64 = tape.data(q).data().iter().map(|x| x * x).sum();
        let gate = sigmoid(qn / (8.0f64).sqrt());
        for (o, vv) in tape.data(out).data().iter().zip(tape.data(v).data()) {
            assert!((o - gate * vv).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_attention_is_half_mean_value() {
        let mut r = Rng::from_seed(2);
        let mut tape = Tape::new();
        let q = tape.input(Tensor::zeros(&[3, 4]));
        let k = tape.input(rand_mat(&mut r, 5, 4));
        let v = tape.input(rand_mat(&mut r, 5, 4));
        let out = combined_attention(&mut tape, q, k, v, true).unwrap();
        // scores all zero: C_soft uniform 1/5, C_sig = 0.5
        for row in 0..3 {
            for col in 0..4 {
                let mean: f64 = (0..5).map(|i| tape.data(v).at2(i, col)).sum::<f64>() / 5.0;
                assert!((tape.data(out).at2(row, col) - 0.5 * mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_attention_matches_loop_oracle() {
        let mut r = Rng::from_seed(3);
        let (m, d) = (4, 8);
        let mut tape = Tape::new();
        let q = tape.input(rand_mat(&mut r, m, d));
        let k = tape.input(rand_mat(&mut r, m, d));
        let v = tape.input(rand_mat(&mut r, m, d));
        let out = combined_attention(&mut tape, q, k, v, true).unwrap();

        // scalar loop oracle
        let (qd, kd, vd) = (tape.data(q).data(), tape.data(k).data(), tape.data(v).data());
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>() * scale
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let c_row: Vec<f64> = scores
                .iter()
                .zip(&exps)
                .map(|(s, e)| (e / z) * sigmoid(*s))
                .collect();
            let row_sum: f64 = c_row.iter().sum();
            assert!(row_sum <= 1.0, "gated row sum {row_sum} exceeds 1");
            for c in 0..d {
                let want: f64 = (0..m).map(|j| c_row[j] * vd[j * d + c]).sum();
                assert!((tape.data(out).at2(i, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn disabling_sigmoid_reproduces_pure_softmax() {
        let mut r = Rng::from_seed(4);
        let (m, d) = (5, 6);
        let mut tape = Tape::new();
        let q = tape.input(rand_mat(&mut r, m, d));
        let k = tape.input(rand_mat(&mut r, m, d));
        let v = tape.input(rand_mat(&mut r, m, d));
        let out = combined_attention(&mut tape, q, k, v, false).unwrap();
        let (qd, kd, vd) = (tape.data(q).data(), tape.data(k).data(), tape.data(v).data());
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let want: f64 = (0..m).map(|j| exps[j] / z * vd[j * d + c]).sum();
                assert!((tape.data(out).at2(i, c) - want).abs() <= 1e-12);
            }
        }
    }

    // ── encoder / decoder ────────────────────────────────────────────

    fn zeroed_enc_layer(ps: &mut ParamSet) -> EncLayerIds {
        let d = EMBED_DIM;
        let zeros2 = |ps: &mut ParamSet, n: &str| ps.add(n, Tensor::zeros(&[d, d]));
        let zeros1 = |ps: &mut ParamSet, n: &str| ps.add(n, Tensor::zeros(&[d]));
        EncLayerIds {
            attn: AttnIds {
                wq: zeros2(ps, "wq"),
                bq: zeros1(ps, "bq"),
                wk: zeros2(ps, "wk"),
                bk: zeros1(ps, "bk"),
                wv: zeros2(ps, "wv"),
                bv: zeros1(ps, "bv"),
                wo: zeros2(ps, "wo"),
                bo: zeros1(ps, "bo"),
            },
            ln1_g: ps.add("ln1g", Tensor::full(&[d], 1.0)),
            ln1_b: zeros1(ps, "ln1b"),
            ffn_w1: ps.add("fw1", Tensor::zeros(&[d, d])),
            ffn_b1: zeros1(ps, "fb1"),
            ffn_w2: ps.add("fw2", Tensor::zeros(&[d, d])),
            ffn_b2: zeros1(ps, "fb2"),
            ln2_g: ps.add("ln2g", Tensor::full(&[d], 1.0)),
            ln2_b: zeros1(ps, "ln2b"),
        }
    }

    #[test]
    fn zero_weight_encoder_is_double_layer_norm() {
        let mut ps = ParamSet::new();
        let layer = zeroed_enc_layer(&mut ps);
        let mut r = Rng::from_seed(5);
        let mut tape = Tape::new();
        let x = tape.input(rand_mat(&mut r, 3, EMBED_DIM));
        let y = encode(&mut tape, &ps, &[layer], x, 1, true).unwrap();
        // independent double layer-norm reference
        let ln = |row: &mut [f64]| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        };
        let mut want = tape.data(x).data().to_vec();
        for row in want.chunks_mut(EMBED_DIM) {
            ln(row);
            ln(row);
        }
        for (a, b) in tape.data(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_preserves_shape_and_rejects_empty() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(6);
        let layer = EncLayerIds::init(&mut ps, &mut rng, 64, "enc0");
        let mut tape = Tape::new();
        for m in [1usize, 3, 9] {
            let x = tape.input(rand_mat(&mut rng, m, EMBED_DIM));
            let y = encode(&mut tape, &ps, &[layer.clone()], x, 1, true).unwrap();
            assert_eq!(tape.data(y).shape(), &[m, EMBED_DIM]);
        }
        let empty = tape.input(Tensor::zeros(&[0, EMBED_DIM]));
        assert!(matches!(
            encode(&mut tape, &ps, &[layer], empty, 1, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_attention_single_encoder_token_copies_gated_value() {
        let mut r = Rng::from_seed(7);
        let mut tape = Tape::new();
        let queries = tape.input(rand_mat(&mut r, 4, 8));
        let k = tape.input(rand_mat(&mut r, 1, 8));
        let v = tape.input(rand_mat(&mut r, 1, 8));
        let out = combined_attention(&mut tape, queries, k, v, true).unwrap();
        for i in 0..4 {
            let score: f64 = (0..8)
                .map(|c| tape.data(queries).at2(i, c) * tape.data(k).at2(0, c))
                .sum::<f64>()
                / (8.0f64).sqrt();
            let gate = sigmoid(score);
            for c in 0..8 {
                assert!((tape.data(out).at2(i, c) - gate * tape.data(v).at2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_output_count_matches_queries() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(8);
        let layer = DecLayerIds::init(&mut ps, &mut rng, 64, "dec0");
        let mut tape = Tape::new();
        let queries = tape.input(rand_mat(&mut rng, 7, EMBED_DIM));
        let enc = tape.input(rand_mat(&mut rng, 13, EMBED_DIM));
        let out = decode(&mut tape, &ps, &[layer], queries, enc, 1, true).unwrap();
        assert_eq!(tape.data(out).shape(), &[7, EMBED_DIM]);
    }

    #[test]
    fn multi_head_attention_preserves_shape() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(9);
        let attn = AttnIds::init(&mut ps, &mut rng, "mh");
        let mut tape = Tape::new();
        let x = tape.input(rand_mat(&mut rng, 5, EMBED_DIM));
        let y = attention_block(&mut tape, &ps, &attn, x, x, 4, true).unwrap();
        assert_eq!(tape.data(y).shape(), &[5, EMBED_DIM]);
    }

    // ── identity head and assignment ─────────────────────────────────

    #[test]
    fn identity_scores_sum_to_one_over_44_classes() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(10);
        let head = IdentityHeadIds::init(&mut ps, &mut rng);
        let mut tape = Tape::new();
        let tokens = tape.input(rand_mat(&mut rng, 6, EMBED_DIM));
        let (_, probs) = predict_identities(&mut tape, &ps, &head, tokens).unwrap();
        assert_eq!(tape.data(probs).shape(), &[6, NUM_IDENTITY_CLASSES]);
        assert_eq!(NUM_IDENTITY_CLASSES, 44);
        for row in tape.data(probs).data().chunks(NUM_IDENTITY_CLASSES) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_exact_hit_gets_joint_label() {
        let peaks = vec![Peak { x: 10, y: 12, value: 0.9 }];
        let gt = vec![(hand_joint_class(1, 4), 10.0, 12.0)];
        assert_eq!(assign_gt_identities(&peaks, &gt, 3.0), vec![hand_joint_class(1, 4)]);
    }

    #[test]
    fn assignment_beyond_gamma_is_background() {
        let peaks = vec![Peak { x: 10, y: 12, value: 0.9 }];
        let gt = vec![(3, 15.0, 12.0), (7, 10.0, 18.0)]; // 5 and 6 px away
        assert_eq!(assign_gt_identities(&peaks, &gt, 3.0), vec![BACKGROUND_CLASS]);
    }

    #[test]
    fn assignment_tie_breaks_to_smaller_joint() {
        let peaks = vec![Peak { x: 10, y: 10, value: 0.9 }];
        // classes 4 and 7 both exactly 2 px away
        let gt = vec![(7, 12.0, 10.0), (4, 8.0, 10.0)];
        assert_eq!(assign_gt_identities(&peaks, &gt, 3.0), vec![4]);
    }

    #[test]
    fn assignment_is_deterministic_and_idempotent() {
        let peaks = vec![
            Peak { x: 3, y: 4, value: 0.8 },
            Peak { x: 20, y: 21, value: 0.7 },
        ];
        let gt = vec![(2, 3.0, 5.0), (9, 19.0, 21.0)];
        let a = assign_gt_identities(&peaks, &gt, 3.0);
        let b = assign_gt_identities(&peaks, &gt, 3.0);
        assert_eq!(a, b);
        assert_eq!(a, vec![2, 9]);
    }

    // ── pose head ────────────────────────────────────────────────────

    #[test]
    fn rotation_output_is_orthonormal_det_plus_one() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(11);
        let head = PoseHeadIds::init(&mut ps, &mut rng);
        let mut tape = Tape::new();
        let decoded = tape.input(rand_mat(&mut rng, 8, EMBED_DIM));
        let pose = predict_poses(&mut tape, &ps, &head, decoded, 100.0).unwrap();
        let r = tape.data(pose.rotation).data();
        let rows = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|c| rows[i][c] * rows[j][c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "rows {i},{j} dot {dot}");
            }
        }
        let det = crate::mat3::det(&rows);
        assert!((det - 1.0).abs() < 1e-6, "det {det}");
    }

    #[test]
    fn pose_output_shapes() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(12);
        let head = PoseHeadIds::init(&mut ps, &mut rng);
        let mut tape = Tape::new();
        let decoded = tape.input(rand_mat(&mut rng, 4, EMBED_DIM));
        let pose = predict_poses(&mut tape, &ps, &head, decoded, 100.0).unwrap();
        assert_eq!(tape.data(pose.joints).shape(), &[126]);
        assert_eq!(tape.data(pose.rel_translation).shape(), &[3]);
        assert_eq!(tape.data(pose.rotation).shape(), &[3, 3]);
        assert_eq!(tape.data(pose.obj_translation).shape(), &[3]);
        let out = PoseOutput::from_vars(&tape, &pose);
        for h in 0..2 {
            for c in 0..3 {
                assert_eq!(out.joints[h][0][c], 0.0, "wrist must be origin");
            }
        }
    }

    // ── permutation equivariance ─────────────────────────────────────

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(13);
        let layers = vec![
            EncLayerIds::init(&mut ps, &mut rng, 64, "e0"),
            EncLayerIds::init(&mut ps, &mut rng, 64, "e1"),
        ];
        let m = 6;
        let base = rand_mat(&mut rng, m, EMBED_DIM);
        let perm: Vec<usize> = vec![4, 0, 5, 2, 1, 3];
        let mut permuted = Tensor::zeros(&[m, EMBED_DIM]);
        for (dst, &src) in perm.iter().enumerate() {
            let s = &base.data()[src * EMBED_DIM..(src + 1) * EMBED_DIM];
            permuted.data_mut()[dst * EMBED_DIM..(dst + 1) * EMBED_DIM].copy_from_slice(s);
        }
        let mut tape = Tape::new();
        let x = tape.input(base);
        let xp = tape.input(permuted);
        let y = encode(&mut tape, &ps, &layers, x, 1, true).unwrap();
        let yp = encode(&mut tape, &ps, &layers, xp, 1, true).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..EMBED_DIM {
                let a = tape.data(yp).at2(dst, c);
                let b = tape.data(y).at2(src, c);
                assert!((a - b).abs() < 1e-9, "row {dst} col {c}: {a} vs {b}");
            }
        }
    }
}
