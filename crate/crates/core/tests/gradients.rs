//! Central-difference verification of reverse-mode gradients, from single
//! ops up through the CIET block and the encoder/decoder stacks.

use hop_core::ciet::{self, CietIds};
use hop_core::fdgrad::{finite_difference_grad, rel_error};
use hop_core::params::{ParamId, ParamSet};
use hop_core::posetr::{self, DecLayerIds, EncLayerIds};
use hop_core::rng::Rng;
use hop_core::tape::{Tape, Var};
use hop_core::tensor::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.range(-1.0, 1.0)).collect())
}

/// Check every parameter of `ps` against central differences for the scalar
/// produced by `build`. Groups up to 64 elements are checked exhaustively;
/// larger ones are sampled (8 deterministic picks) to keep the sweep fast.
fn check_all_params(ps: &mut ParamSet, build: impl Fn(&mut Tape, &ParamSet) -> Var) {
    // analytic gradients
    let mut tape = Tape::new();
    let loss = build(&mut tape, ps);
    let grads = tape.backward(loss).unwrap();
    ps.zero_grads();
    grads.apply_to(&tape, ps);
    let analytic: Vec<Tensor> = ps.ids().map(|id| ps.get(id).grad.clone()).collect();

    let mut eval = |ps: &ParamSet| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, ps);
        tape.data(loss).item()
    };
    let ids: Vec<ParamId> = ps.ids().collect();
    for (gi, id) in ids.into_iter().enumerate() {
        let name = ps.get(id).name.clone();
        let n = ps.get(id).value.numel();
        let picks: Vec<usize> = if n <= 64 {
            (0..n).collect()
        } else {
            let mut r = Rng::from_seed(1000 + gi as u64);
            (0..8).map(|_| r.below(n)).collect()
        };
        for i in picks {
            let numeric = hop_core::fdgrad::fd_element(ps, id, i, STEP, &mut eval);
            let a = analytic[gi].data()[i];
            let err = rel_error(a, numeric);
            assert!(
                err <= TOL,
                "param {name}[{i}]: analytic {a:.9e} vs numeric {numeric:.9e} (rel {err:.2e})"
            );
        }
    }
}

#[test]
fn matmul_and_bias_gradients() {
    let mut rng = Rng::from_seed(1);
    let mut ps = ParamSet::new();
    let w = ps.add("w", rand_tensor(&mut rng, &[4, 3]));
    let b = ps.add("b", rand_tensor(&mut rng, &[3]));
    let x = rand_tensor(&mut rng, &[5, 4]);
    check_all_params(&mut ps, move |tape, ps| {
        let xv = tape.input(x.clone());
        let wv = tape.param(ps, w);
        let bv = tape.param(ps, b);
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.add_bias(y, bv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
}

#[test]
fn conv2d_gradients_stride_1_and_2() {
    let mut rng = Rng::from_seed(2);
    for stride in [1usize, 2] {
        let mut ps = ParamSet::new();
        let w = ps.add("w", rand_tensor(&mut rng, &[3, 3, 2, 3]));
        let x = rand_tensor(&mut rng, &[6, 6, 2]);
        check_all_params(&mut ps, move |tape, ps| {
            let xv = tape.input(x.clone());
            let wv = tape.param(ps, w);
            let y = tape.conv2d(xv, wv, stride).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq)
        });
    }
}

#[test]
fn activation_and_norm_gradients() {
    let mut rng = Rng::from_seed(3);
    let mut ps = ParamSet::new();
    let p = ps.add("p", rand_tensor(&mut rng, &[4, 8]));
    let gamma = ps.add("gamma", rand_tensor(&mut rng, &[8]));
    let beta = ps.add("beta", rand_tensor(&mut rng, &[8]));
    check_all_params(&mut ps, move |tape, ps| {
        let pv = tape.param(ps, p);
        let g = tape.param(ps, gamma);
        let b = tape.param(ps, beta);
        let s = tape.sigmoid(pv);
        let r = tape.relu(s);
        let ln = tape.layer_norm(r, g, b, 1e-6).unwrap();
        let sm = tape.softmax_last(ln);
        let lsm = tape.log_softmax_last(sm);
        let sq = tape.mul(lsm, lsm).unwrap();
        tape.mean_all(sq)
    });
}

#[test]
fn shape_op_gradients() {
    let mut rng = Rng::from_seed(4);
    let mut ps = ParamSet::new();
    let p = ps.add("p", rand_tensor(&mut rng, &[4, 4, 2]));
    let q = ps.add("q", rand_tensor(&mut rng, &[4, 4, 3]));
    let gate = ps.add("gate", rand_tensor(&mut rng, &[5]));
    check_all_params(&mut ps, move |tape, ps| {
        let pv = tape.param(ps, p);
        let qv = tape.param(ps, q);
        let gv = tape.param(ps, gate);
        let cat = tape.concat_channels(pv, qv).unwrap();
        let up = tape.upsample2x(cat).unwrap();
        let flat = tape.slice_flat(up, 10, 40).unwrap();
        let m = tape.concat_flat(&[flat], vec![8, 5]).unwrap();
        let gated = tape.mul_last(m, gv).unwrap();
        let rows = tape.sum_rows(gated).unwrap();
        let sq = tape.mul(rows, rows).unwrap();
        tape.sum_all(sq)
    });
}

#[test]
fn scalar_broadcast_and_sqrt_gradients() {
    let mut rng = Rng::from_seed(5);
    let mut ps = ParamSet::new();
    let p = ps.add("p", rand_tensor(&mut rng, &[6]));
    let s = ps.add("s", Tensor::scalar(1.7));
    check_all_params(&mut ps, move |tape, ps| {
        let pv = tape.param(ps, p);
        let sv = tape.param(ps, s);
        let scaled = tape.mul_scalar(pv, sv).unwrap();
        let sq = tape.mul(scaled, scaled).unwrap();
        let root = tape.sqrt_eps(sq, 1e-9);
        let div = tape.div_scalar(root, sv).unwrap();
        let a = tape.abs(div);
        tape.sum_all(a)
    });
}

#[test]
fn combined_attention_gradients() {
    let mut rng = Rng::from_seed(6);
    let mut ps = ParamSet::new();
    let q = ps.add("q", rand_tensor(&mut rng, &[4, 8]));
    let k = ps.add("k", rand_tensor(&mut rng, &[5, 8]));
    let v = ps.add("v", rand_tensor(&mut rng, &[5, 8]));
    for use_sigmoid in [true, false] {
        check_all_params(&mut ps, move |tape, ps| {
            let qv = tape.param(ps, q);
            let kv = tape.param(ps, k);
            let vv = tape.param(ps, v);
            let out = posetr::combined_attention(tape, qv, kv, vv, use_sigmoid).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum_all(sq)
        });
    }
}

#[test]
fn ciet_block_gradients_match_central_differences() {
    let mut rng = Rng::from_seed(7);
    let mut ps = ParamSet::new();
    let ids = CietIds::init(&mut ps, &mut rng, 4, "ciet");
    let f = rand_tensor(&mut rng, &[6, 6, 4]);
    let ids2 = ids.clone();
    check_all_params(&mut ps, move |tape, ps| {
        let fv = tape.input(f.clone());
        let out = ciet::ciet_refine(tape, ps, &ids2, fv).unwrap();
        // random-ish fixed projection to a scalar
        let sq = tape.mul(out, out).unwrap();
        tape.mean_all(sq)
    });
}

#[test]
fn fuse_attention_theta_gradient_via_mean() {
    // gradient of mean(A) w.r.t. the first fusion conv
    let mut rng = Rng::from_seed(8);
    let mut ps = ParamSet::new();
    let ids = CietIds::init(&mut ps, &mut rng, 3, "c");
    let f = rand_tensor(&mut rng, &[5, 5, 3]);

    let build = {
        let ids = ids.clone();
        let f = f.clone();
        move |tape: &mut Tape, ps: &ParamSet| {
            let fv = tape.input(f.clone());
            let k1 = ciet::contextualize_keys(tape, ps, &ids, fv).unwrap();
            let a = ciet::fuse_attention(tape, ps, &ids, k1, fv).unwrap();
            tape.mean_all(a)
        }
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, &ps);
    let grads = tape.backward(loss).unwrap();
    ps.zero_grads();
    grads.apply_to(&tape, &mut ps);
    let analytic = ps.get(ids.theta_w).grad.clone();
    let numeric = finite_difference_grad(&mut ps, ids.theta_w, STEP, |ps| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, ps);
        tape.data(loss).item()
    });
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        assert!(rel_error(a, n) <= TOL, "theta grad {a} vs {n}");
    }
}

#[test]
fn encoder_two_layer_gradients() {
    let mut rng = Rng::from_seed(9);
    let mut ps = ParamSet::new();
    let layers = vec![
        EncLayerIds::init(&mut ps, &mut rng, 32, "e0"),
        EncLayerIds::init(&mut ps, &mut rng, 32, "e1"),
    ];
    let tokens = rand_tensor(&mut rng, &[3, hop_core::EMBED_DIM]);
    check_all_params(&mut ps, move |tape, ps| {
        let t = tape.input(tokens.clone());
        let y = posetr::encode(tape, ps, &layers, t, 1, true).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    });
}

#[test]
fn decoder_gradients() {
    let mut rng = Rng::from_seed(10);
    let mut ps = ParamSet::new();
    let layers = vec![DecLayerIds::init(&mut ps, &mut rng, 32, "d0")];
    let queries = ps.add("queries", rand_tensor(&mut rng, &[4, hop_core::EMBED_DIM]));
    let enc = rand_tensor(&mut rng, &[5, hop_core::EMBED_DIM]);
    check_all_params(&mut ps, move |tape, ps| {
        let qv = tape.param(ps, queries);
        let e = tape.input(enc.clone());
        let y = posetr::decode(tape, ps, &layers, qv, e, 1, true).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    });
}

#[test]
fn rotation_head_gradients() {
    let mut rng = Rng::from_seed(11);
    let mut ps = ParamSet::new();
    let six = ps.add("six", rand_tensor(&mut rng, &[6]));
    check_all_params(&mut ps, move |tape, ps| {
        let s = tape.param(ps, six);
        let r = posetr::rotation_from_6d(tape, s).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let target = tape.input(Tensor::full(&[3, 3], 0.2));
        let d = tape.sub(sq, target).unwrap();
        let dd = tape.mul(d, d).unwrap();
        tape.sum_all(dd)
    });
}

#[test]
fn multi_head_attention_gradients() {
    let mut rng = Rng::from_seed(12);
    let mut ps = ParamSet::new();
    let attn = posetr::AttnIds {
        wq: ps.add("wq", rand_tensor(&mut rng, &[hop_core::EMBED_DIM, hop_core::EMBED_DIM])),
        bq: ps.add("bq", rand_tensor(&mut rng, &[hop_core::EMBED_DIM])),
        wk: ps.add("wk", rand_tensor(&mut rng, &[hop_core::EMBED_DIM, hop_core::EMBED_DIM])),
        bk: ps.add("bk", rand_tensor(&mut rng, &[hop_core::EMBED_DIM])),
        wv: ps.add("wv", rand_tensor(&mut rng, &[hop_core::EMBED_DIM, hop_core::EMBED_DIM])),
        bv: ps.add("bv", rand_tensor(&mut rng, &[hop_core::EMBED_DIM])),
        wo: ps.add("wo", rand_tensor(&mut rng, &[hop_core::EMBED_DIM, hop_core::EMBED_DIM])),
        bo: ps.add("bo", rand_tensor(&mut rng, &[hop_core::EMBED_DIM])),
    };
    // scale projections down so the sigmoid branch stays in range
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.get_mut(id).value.data_mut() {
            *v *= 0.05;
        }
    }
    let x = rand_tensor(&mut rng, &[3, hop_core::EMBED_DIM]);
    // only sample a few weights: the full matrices are too large for FD
    let mut tape = Tape::new();
    let build = {
        let attn = attn.clone();
        let x = x.clone();
        move |tape: &mut Tape, ps: &ParamSet| {
            let xv = tape.input(x.clone());
            let y = posetr::attention_block(tape, ps, &attn, xv, xv, 4, true).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean_all(sq)
        }
    };
    let loss = build(&mut tape, &ps);
    let grads = tape.backward(loss).unwrap();
    ps.zero_grads();
    grads.apply_to(&tape, &mut ps);
    let analytic = ps.get(attn.wq).grad.clone();
    let mut probe = Rng::from_seed(77);
    for _ in 0..6 {
        let i = probe.below(analytic.numel());
        let numeric = hop_core::fdgrad::fd_element(&mut ps, attn.wq, i, STEP, &mut |ps: &ParamSet| {
            let mut tape = Tape::new();
            let loss = build(&mut tape, ps);
            tape.data(loss).item()
        });
        let err = rel_error(analytic.data()[i], numeric);
        assert!(err <= TOL, "wq[{i}] rel err {err:.2e}");
    }
}
