//! Full pipeline assembly: scene -> image -> features -> refined features ->
//! heatmaps / segmentation -> tokens -> encoder -> identity head and
//! decoder -> pose head, plus the training loss and the gradient audit.
//!
//! Discrete choices made during a forward pass (detected peaks, sampled
//! object pixels, the symmetry branch of the corner loss) are captured in a
//! [`Plan`]. Re-running with a frozen plan makes the loss a smooth function
//! of the parameters, which is what the central-difference audit requires.

use crate::backbone::{self, BackboneIds, SEG_OBJECT};
use crate::ciet::{self, CietIds};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fdgrad;
use crate::losses::{self, LossBreakdown};
use crate::mat3::{self, Mat3};
use crate::params::{ParamId, ParamSet};
use crate::posetr::{self, DecLayerIds, EncLayerIds, IdentityHeadIds, Peak, PoseHeadIds, PoseVars};
use crate::rng::{self, streams, Rng, SeedRng};
use crate::synthdata::{self, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{BACKGROUND_CLASS, EMBED_DIM, GRID, NUM_HANDS, NUM_JOINTS, OBJECT_CLASS};

const OBJECT_SAMPLE_SALT: u64 = 0x0b7e_c7a9_5eed_0001;

/// Every parameter id of the network, grouped by stage.
#[derive(Clone, Debug)]
pub struct ModelArch {
    pub backbone: BackboneIds,
    pub ciet_hand: CietIds,
    pub ciet_obj: CietIds,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub queries: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
    pub ident: IdentityHeadIds,
    pub pose: PoseHeadIds,
}

pub struct Model {
    pub arch: ModelArch,
    pub ps: ParamSet,
    pub cfg: RunConfig,
}

impl Model {
    /// Deterministic initialization from (config, seed).
    pub fn init(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = SeedRng::new(cfg.seed).stream(streams::PARAM_INIT, 0);
        let c = cfg.channels;
        let backbone = BackboneIds::init(&mut ps, &mut rng, c);
        let ciet_hand = CietIds::init(&mut ps, &mut rng, c, "ciet_hand");
        let ciet_obj = CietIds::init(&mut ps, &mut rng, c, "ciet_obj");
        let proj_w = ps.add_uniform("token.proj.w", &[c, EMBED_DIM], c, &mut rng);
        let proj_b = ps.add("token.proj.b", Tensor::zeros(&[EMBED_DIM]));
        let queries = ps.add_uniform(
            "decoder.queries",
            &[cfg.queries, EMBED_DIM],
            EMBED_DIM,
            &mut rng,
        );
        let enc = (0..cfg.enc_layers)
            .map(|i| EncLayerIds::init(&mut ps, &mut rng, cfg.ffn_dim, &format!("enc{i}")))
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|i| DecLayerIds::init(&mut ps, &mut rng, cfg.ffn_dim, &format!("dec{i}")))
            .collect();
        let ident = IdentityHeadIds::init(&mut ps, &mut rng);
        let pose = PoseHeadIds::init(&mut ps, &mut rng);
        let arch = ModelArch {
            backbone,
            ciet_hand,
            ciet_obj,
            proj_w,
            proj_b,
            queries,
            enc,
            dec,
            ident,
            pose,
        };
        Ok(Model { arch, ps, cfg: cfg.clone() })
    }

    pub fn run(&self, tape: &mut Tape, scene: &Scene, frozen: Option<&Plan>) -> Result<RunResult> {
        run_with_params(&self.arch, &self.ps, &self.cfg, tape, scene, frozen)
    }
}

/// Frozen discrete structure of one forward pass.
#[derive(Clone, Debug)]
pub struct Plan {
    pub peaks: Vec<Peak>,
    pub object_points: Vec<(usize, usize)>,
    pub object_degenerate: bool,
    pub sym_index: usize,
}

/// Tape handles produced by a forward pass.
pub struct Forward {
    pub features: Var,
    pub heatmaps: Var,
    pub segmentation: Var,
    pub encoded: Var,
    pub ident_logits: Var,
    pub ident_probs: Var,
    /// Ground-truth identity class per token (peaks first, then object
    /// points).
    pub labels: Vec<usize>,
    pub n_peak_tokens: usize,
    pub pose: PoseVars,
}

pub struct LossVars {
    pub heatmap: Var,
    pub joints: Var,
    pub translation: Var,
    pub hand_pose: Var,
    pub object_pose: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, cfg: &RunConfig) -> LossBreakdown {
        LossBreakdown::from_terms(
            &cfg.loss_weights(),
            tape.data(self.heatmap).item(),
            tape.data(self.joints).item(),
            tape.data(self.translation).item(),
            tape.data(self.hand_pose).item(),
            tape.data(self.object_pose).item(),
        )
    }
}

pub struct RunResult {
    pub fwd: Forward,
    pub loss: LossVars,
    pub plan: Plan,
}

/// Ground-truth heatmaps for a scene on the 32x32 grid. Occluded joints are
/// included: localizing them is the point of the refinement stages.
pub fn scene_gt_heatmaps(scene: &Scene, sigma: f64) -> Tensor {
    let mut joints = [[0.0; 2]; NUM_HANDS * NUM_JOINTS];
    let mut active = [false; NUM_HANDS * NUM_JOINTS];
    for h in 0..NUM_HANDS {
        for j in 0..NUM_JOINTS {
            let idx = h * NUM_JOINTS + j;
            joints[idx] = [scene.joints2d[h][j][0] / 2.0, scene.joints2d[h][j][1] / 2.0];
            active[idx] = scene.hand_present[h];
        }
    }
    backbone::render_gt_heatmaps(&joints, &active, sigma)
}

/// (class, u, v) of every present ground-truth joint on the grid.
fn gt_joint_classes(scene: &Scene) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for h in 0..NUM_HANDS {
        if !scene.hand_present[h] {
            continue;
        }
        for j in 0..NUM_JOINTS {
            out.push((
                posetr::hand_joint_class(h, j),
                scene.joints2d[h][j][0] / 2.0,
                scene.joints2d[h][j][1] / 2.0,
            ));
        }
    }
    out
}

/// Full forward + loss construction. With `frozen` supplied, the discrete
/// plan is reused instead of recomputed, making the result a smooth
/// function of the parameters.
pub fn run_with_params(
    arch: &ModelArch,
    ps: &ParamSet,
    cfg: &RunConfig,
    tape: &mut Tape,
    scene: &Scene,
    frozen: Option<&Plan>,
) -> Result<RunResult> {
    let image = tape.input(synthdata::render(scene));
    tape.tag(image, "input.image");

    // backbone and refinement
    let features = backbone::extract_features(tape, ps, &arch.backbone, image)?;
    let segmentation = backbone::predict_segmentation(tape, ps, &arch.backbone, features)?;
    let f_hand = if cfg.use_ciet {
        ciet::ciet_refine(tape, ps, &arch.ciet_hand, features)?
    } else {
        features
    };
    let heatmaps = backbone::predict_heatmaps(tape, ps, &arch.backbone, f_hand)?;
    let f_obj = if cfg.use_ciet {
        ciet::ciet_refine(tape, ps, &arch.ciet_obj, features)?
    } else {
        features
    };

    // discrete structure: peaks and object pixels
    let (peaks, object_points, object_degenerate) = match frozen {
        Some(p) => (p.peaks.clone(), p.object_points.clone(), p.object_degenerate),
        None => {
            let peaks =
                posetr::extract_peaks(tape.data(heatmaps), cfg.peak_threshold, cfg.max_tokens);
            let sampled = backbone::sample_object_points(
                tape.data(segmentation),
                rng::splitmix64(scene.seed ^ OBJECT_SAMPLE_SALT),
            );
            (peaks, sampled.points, sampled.degenerate)
        }
    };
    let n_peaks = peaks.len();
    let n_tokens = n_peaks + object_points.len();

    // token features: C-dim columns of the refined maps at each position
    let c = cfg.channels;
    let mut cols: Vec<Var> = Vec::with_capacity(n_tokens);
    for p in &peaks {
        cols.push(tape.slice_flat(f_hand, (p.y * GRID + p.x) * c, c)?);
    }
    for &(x, y) in &object_points {
        cols.push(tape.slice_flat(f_obj, (y * GRID + x) * c, c)?);
    }
    let feats = tape.concat_flat(&cols, vec![n_tokens, c])?;
    let proj_w = tape.param(ps, arch.proj_w);
    let proj_b = tape.param(ps, arch.proj_b);
    let projected = tape.matmul(feats, proj_w)?;
    let projected = tape.add_bias(projected, proj_b)?;

    let mut positions: Vec<(usize, usize)> = peaks.iter().map(|p| (p.x, p.y)).collect();
    positions.extend(object_points.iter().copied());
    let pe = tape.input(posetr::build_positional_input(&positions));
    let tokens = tape.add(projected, pe)?;

    // object tokens are weighted by the predicted object probability at
    // their pixel, so the segmentation head sits on the gradient path
    let mut gate_parts: Vec<Var> = Vec::new();
    if n_peaks > 0 {
        gate_parts.push(tape.input(Tensor::full(&[n_peaks], 1.0)));
    }
    for &(x, y) in &object_points {
        let idx = (y * GRID + x) * backbone::NUM_SEG_CLASSES + SEG_OBJECT;
        gate_parts.push(tape.slice_flat(segmentation, idx, 1)?);
    }
    let gate = tape.concat_flat(&gate_parts, vec![n_tokens])?;
    let tokens_t = tape.transpose(tokens)?;
    let gated_t = tape.mul_last(tokens_t, gate)?;
    let tokens = tape.transpose(gated_t)?;
    tape.tag(tokens, "tokens.input");

    // encoder, identity head, decoder, pose head
    let encoded = posetr::encode(
        tape,
        ps,
        &arch.enc,
        tokens,
        cfg.heads,
        cfg.use_sigmoid_attention,
    )?;
    tape.tag(encoded, "encoder.out");
    let (ident_logits, ident_probs) = posetr::predict_identities(tape, ps, &arch.ident, encoded)?;
    let queries = tape.param(ps, arch.queries);
    let decoded = posetr::decode(
        tape,
        ps,
        &arch.dec,
        queries,
        encoded,
        cfg.heads,
        cfg.use_sigmoid_attention,
    )?;
    tape.tag(decoded, "decoder.out");
    let pose = posetr::predict_poses(tape, ps, &arch.pose, decoded, cfg.pose_gain)?;

    // ground-truth identity labels: gamma-threshold assignment for peaks,
    // ground-truth footprint membership for object points
    let mut labels = posetr::assign_gt_identities(&peaks, &gt_joint_classes(scene), cfg.gamma_px);
    let gt_seg = synthdata::gt_segmentation(scene);
    for &(x, y) in &object_points {
        labels.push(if gt_seg[y * GRID + x] == SEG_OBJECT { OBJECT_CLASS } else { BACKGROUND_CLASS });
    }

    // ── losses ───────────────────────────────────────────────────────
    let hm_gt = tape.input(scene_gt_heatmaps(scene, cfg.heatmap_sigma));
    let l_heatmap = losses::heatmap_loss_t(tape, heatmaps, hm_gt)?;

    let l_joints = losses::identity_loss_t(tape, ident_logits, &labels)?;

    let both_hands = scene.hand_present[0] && scene.hand_present[1];
    let l_translation = if both_hands {
        let rel_gt = mat3::sub(&scene.joints3d[1][0], &scene.joints3d[0][0]);
        let gt = tape.input(Tensor::new(vec![3], rel_gt.to_vec()));
        losses::l1_sum_t(tape, pose.rel_translation, gt)?
    } else {
        tape.scalar_input(0.0)
    };

    // root-relative hand joints on both sides of the comparison
    let mut rel_parts: Vec<Var> = Vec::with_capacity(NUM_HANDS);
    for h in 0..NUM_HANDS {
        let wrist = tape.slice_flat(pose.joints, h * 63, 3)?;
        let joints_h = tape.slice_flat(pose.joints, h * 63, 63)?;
        let wrist_rep = tape.concat_flat(&vec![wrist; NUM_JOINTS], vec![63])?;
        rel_parts.push(tape.sub(joints_h, wrist_rep)?);
    }
    let pred_rel = tape.concat_flat(&rel_parts, vec![126])?;
    let mut gt_rel = vec![0.0; 126];
    let mut mask = vec![0.0; 126];
    let mut n_active = 0usize;
    for h in 0..NUM_HANDS {
        if !scene.hand_present[h] {
            continue;
        }
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                gt_rel[h * 63 + j * 3 + k] = scene.joints3d[h][j][k] - scene.joints3d[h][0][k];
                mask[h * 63 + j * 3 + k] = 1.0;
                n_active += 1;
            }
        }
    }
    let gt_rel_v = tape.input(Tensor::new(vec![126], gt_rel));
    let mask_v = tape.input(Tensor::new(vec![126], mask));
    let l_hand_pose = losses::masked_mean_l1_t(tape, pred_rel, gt_rel_v, mask_v, n_active)?;

    // corner loss: pick the best symmetry branch outside the tape, then
    // differentiate through that branch only
    let symmetries = Scene::symmetries();
    let r_pred = tensor_to_mat3(tape.data(pose.rotation));
    let t_pred_data = tape.data(pose.obj_translation).data();
    let t_pred = [t_pred_data[0], t_pred_data[1], t_pred_data[2]];
    let sym_index = match frozen {
        Some(p) => p.sym_index,
        None => losses::best_symmetry_index(
            &r_pred,
            &t_pred,
            &scene.object_rot,
            &scene.object_trans,
            &scene.corners,
            &symmetries,
        )?,
    };
    let sym = &symmetries[sym_index];
    let mut sym_corners = Vec::with_capacity(24);
    for corner in &scene.corners {
        sym_corners.extend(mat3::apply(sym, corner));
    }
    let sym_corners_v = tape.input(Tensor::new(vec![8, 3], sym_corners));
    let mut gt_posed = Vec::with_capacity(24);
    for corner in &scene.posed_corners() {
        gt_posed.extend(*corner);
    }
    let gt_posed_v = tape.input(Tensor::new(vec![8, 3], gt_posed));
    let l_object_pose =
        losses::corner_loss_t(tape, pose.rotation, pose.obj_translation, sym_corners_v, gt_posed_v)?;

    // weighted total
    let w = cfg.loss_weights();
    let t1 = tape.scale(l_heatmap, w.heatmap);
    let t2 = tape.scale(l_joints, w.joints);
    let t3 = tape.scale(l_translation, w.translation);
    let t4 = tape.scale(l_hand_pose, w.hand_pose);
    let t5 = tape.scale(l_object_pose, w.object_pose);
    let s12 = tape.add(t1, t2)?;
    let s123 = tape.add(s12, t3)?;
    let s1234 = tape.add(s123, t4)?;
    let total = tape.add(s1234, t5)?;
    tape.tag(total, "loss.total");

    Ok(RunResult {
        fwd: Forward {
            features,
            heatmaps,
            segmentation,
            encoded,
            ident_logits,
            ident_probs,
            labels,
            n_peak_tokens: n_peaks,
            pose,
        },
        loss: LossVars {
            heatmap: l_heatmap,
            joints: l_joints,
            translation: l_translation,
            hand_pose: l_hand_pose,
            object_pose: l_object_pose,
            total,
        },
        plan: Plan { peaks, object_points, object_degenerate, sym_index },
    })
}

fn tensor_to_mat3(t: &Tensor) -> Mat3 {
    let d = t.data();
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

/// One gradient-descent step on a single scene. Returns the loss breakdown
/// or an error naming the first non-finite tensor.
pub fn train_step(model: &mut Model, scene: &Scene) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let result = model.run(&mut tape, scene, None)?;
    if !tape.data(result.loss.total).is_finite() {
        let culprit = tape.first_non_finite().unwrap_or_else(|| "loss.total".into());
        return Err(Error::Contract(format!(
            "non-finite loss at seed {}: first bad tensor is {culprit}",
            scene.seed
        )));
    }
    let grads = tape.backward(result.loss.total)?;
    model.ps.zero_grads();
    grads.apply_to(&tape, &mut model.ps);
    model.ps.clip_grads(model.cfg.clip_norm);
    let lr = model.cfg.lr;
    model.ps.sgd_step(lr);
    Ok(result.loss.breakdown(&tape, &model.cfg))
}

// ── Gradient audit ───────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradcheckRow {
    pub group: String,
    pub samples: usize,
    pub max_rel_err: f64,
}

/// Compare backward gradients against sampled central differences for every
/// parameter group, on one scene with a frozen plan. `corrupt` perturbs the
/// named group's analytic gradient (negative-control hook for tests).
pub fn gradient_audit(
    model: &Model,
    scene: &Scene,
    corrupt: Option<&str>,
) -> Result<Vec<GradcheckRow>> {
    let cfg = &model.cfg;
    let mut ps = model.ps.clone();

    // analytic pass, capturing the plan
    let mut tape = Tape::new();
    let result = run_with_params(&model.arch, &ps, cfg, &mut tape, scene, None)?;
    let plan = result.plan;
    let grads = tape.backward(result.loss.total)?;
    ps.zero_grads();
    grads.apply_to(&tape, &mut ps);
    let analytic: Vec<Tensor> = ps.ids().map(|id| ps.get(id).grad.clone()).collect();

    let arch = &model.arch;
    let mut eval = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let r = run_with_params(arch, ps, cfg, &mut tape, scene, Some(&plan))
            .expect("frozen-plan forward cannot fail after a successful pass");
        tape.data(r.loss.total).item()
    };

    let mut rows = Vec::new();
    let ids: Vec<ParamId> = ps.ids().collect();
    for (gi, id) in ids.into_iter().enumerate() {
        let name = ps.get(id).name.clone();
        let n = ps.get(id).value.numel();
        let k = cfg.gradcheck_samples.min(n);
        let mut rng = SeedRng::new(cfg.seed).stream(streams::GRADCHECK, gi as u64);
        let picks = pick_indices(&mut rng, n, k);
        let mut max_rel: f64 = 0.0;
        for &i in &picks {
            let numeric = fdgrad::fd_element(&mut ps, id, i, cfg.gradcheck_step, &mut eval);
            let mut a = analytic[gi].data()[i];
            if corrupt == Some(name.as_str()) {
                a += 1.0;
            }
            max_rel = max_rel.max(fdgrad::rel_error(a, numeric));
        }
        rows.push(GradcheckRow { group: name, samples: k, max_rel_err: max_rel });
    }
    Ok(rows)
}

fn pick_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        (0..n).collect()
    } else {
        rng.sample_without_replacement(n, k)
    }
}
