//! Contextual feature refinement (CIET block).
//!
//! Keys are contextualized with a 3x3 convolution over their neighbourhood,
//! concatenated with the query and pushed through two 1x1 convolutions
//! (ReLU after the first, none after the second) to form the attention map
//! A. Values are aggregated per position with a channel softmax of A, and
//! the block adds its output residually: out = F + gain * (V (.) A').
//!
//! The scalar output gain makes a zero-initialized block the exact identity
//! map while still letting the channel-softmax aggregation keep its natural
//! scale during training (gain starts at 1).

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CietIds {
    /// 3x3xCxC static-context extractor for the keys.
    pub key_w: ParamId,
    pub key_b: ParamId,
    /// 1x1x2CxC fusion conv, ReLU-activated.
    pub theta_w: ParamId,
    pub theta_b: ParamId,
    /// 1x1xCxC fusion conv, no activation.
    pub delta_w: ParamId,
    pub delta_b: ParamId,
    /// Scalar residual gain on the aggregated output.
    pub out_gain: ParamId,
}

impl CietIds {
    pub fn init(ps: &mut ParamSet, rng: &mut Rng, channels: usize, prefix: &str) -> Self {
        let c = channels;
        CietIds {
            key_w: ps.add_uniform(&format!("{prefix}.key.w"), &[3, 3, c, c], 9 * c, rng),
            key_b: ps.add(&format!("{prefix}.key.b"), Tensor::zeros(&[c])),
            theta_w: ps.add_uniform(&format!("{prefix}.theta.w"), &[1, 1, 2 * c, c], 2 * c, rng),
            theta_b: ps.add(&format!("{prefix}.theta.b"), Tensor::zeros(&[c])),
            delta_w: ps.add_uniform(&format!("{prefix}.delta.w"), &[1, 1, c, c], c, rng),
            delta_b: ps.add(&format!("{prefix}.delta.b"), Tensor::zeros(&[c])),
            out_gain: ps.add(&format!("{prefix}.out_gain"), Tensor::scalar(1.0)),
        }
    }

    /// All-zero block; `ciet_refine` is then the identity map.
    pub fn zeros(ps: &mut ParamSet, channels: usize, prefix: &str) -> Self {
        let c = channels;
        CietIds {
            key_w: ps.add(&format!("{prefix}.key.w"), Tensor::zeros(&[3, 3, c, c])),
            key_b: ps.add(&format!("{prefix}.key.b"), Tensor::zeros(&[c])),
            theta_w: ps.add(&format!("{prefix}.theta.w"), Tensor::zeros(&[1, 1, 2 * c, c])),
            theta_b: ps.add(&format!("{prefix}.theta.b"), Tensor::zeros(&[c])),
            delta_w: ps.add(&format!("{prefix}.delta.w"), Tensor::zeros(&[1, 1, c, c])),
            delta_b: ps.add(&format!("{prefix}.delta.b"), Tensor::zeros(&[c])),
            out_gain: ps.add(&format!("{prefix}.out_gain"), Tensor::scalar(0.0)),
        }
    }
}

/// K1 = conv3x3(F): static context among each position's neighbours.
pub fn contextualize_keys(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &CietIds,
    f: Var,
) -> Result<Var> {
    let w = tape.param(ps, ids.key_w);
    let b = tape.param(ps, ids.key_b);
    let k1 = tape.conv2d(f, w, 1)?;
    tape.add_bias(k1, b)
}

/// A = conv1x1_delta(relu(conv1x1_theta([K1, Q]))).
pub fn fuse_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &CietIds,
    k1: Var,
    q: Var,
) -> Result<Var> {
    let cat = tape.concat_channels(k1, q)?;
    let theta_w = tape.param(ps, ids.theta_w);
    let theta_b = tape.param(ps, ids.theta_b);
    let h = tape.conv2d(cat, theta_w, 1)?;
    let h = tape.add_bias(h, theta_b)?;
    let h = tape.relu(h);
    let delta_w = tape.param(ps, ids.delta_w);
    let delta_b = tape.param(ps, ids.delta_b);
    let a = tape.conv2d(h, delta_w, 1)?;
    tape.add_bias(a, delta_b)
}

/// Per-position aggregation: gain * (V (.) softmax_channels(A)).
pub fn aggregate(tape: &mut Tape, ps: &ParamSet, ids: &CietIds, v: Var, a: Var) -> Result<Var> {
    let a_norm = tape.softmax_last(a);
    let h = tape.mul(v, a_norm)?;
    let gain = tape.param(ps, ids.out_gain);
    tape.mul_scalar(h, gain)
}

/// Residual refinement: out = F + aggregate(F, fuse(contextualize(F), F)).
/// Queries, keys and values all come from the input feature map.
pub fn ciet_refine(tape: &mut Tape, ps: &ParamSet, ids: &CietIds, f: Var) -> Result<Var> {
    let k1 = contextualize_keys(tape, ps, ids, f)?;
    let a = fuse_attention(tape, ps, ids, k1, f)?;
    let h = aggregate(tape, ps, ids, f, a)?;
    let out = tape.add(f, h)?;
    tape.tag(out, "ciet.refined");
    Ok(out)
}
