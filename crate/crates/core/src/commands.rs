//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, the three-variant ablation harness and the gradient audit.
//! The CLI binary is a thin argument parser over these functions.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mat3;
use crate::metrics;
use crate::model::{gradient_audit, train_step, GradcheckRow, Model};
use crate::posetr::PoseOutput;
use crate::rng::splitmix64;
use crate::synthdata::{self, Scene};
use crate::tape::Tape;
use crate::{GRID, NUM_HANDS, NUM_JOINTS};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const GRADCHECK_THRESHOLD: f64 = 1e-3;

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

// ── generate ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub scenes: u32,
    pub mean_occlusion: f64,
    pub sha256: String,
    pub path: PathBuf,
}

pub fn generate(cfg: &RunConfig, out: &Path, json_out: Option<&Path>) -> Result<GenerateSummary> {
    cfg.validate()?;
    let scene_cfg = cfg.scene_config();
    let scenes: Vec<Scene> = (0..cfg.scenes)
        .map(|i| synthdata::generate_scene(scene_seed(cfg.seed, i as u64), &scene_cfg))
        .collect();
    synthdata::write_dataset(out, &scenes, cfg.seed)?;
    if let Some(jp) = json_out {
        synthdata::write_dataset_json(jp, &scenes, cfg.seed)?;
    }
    let bytes = fs::read(out)?;
    let mean_occlusion = if scenes.is_empty() {
        0.0
    } else {
        scenes.iter().map(|s| s.occlusion_ratio).sum::<f64>() / scenes.len() as f64
    };
    Ok(GenerateSummary {
        scenes: cfg.scenes,
        mean_occlusion,
        sha256: sha256_hex(&bytes),
        path: out.to_path_buf(),
    })
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub start_iteration: u64,
    pub iterations: u64,
    pub first_total: f64,
    pub final_total: f64,
    pub schedule_hash: String,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

pub const LOSS_LOG_HEADER: &str =
    "iteration,l_heatmap,l_joints,l_translation,l_hand_pose,l_object_pose,total";

/// Hash of the scene visitation order for a run; identical budgets on the
/// same dataset give identical hashes.
pub fn schedule_hash(iterations: u64, n_scenes: usize) -> String {
    let mut bytes = Vec::with_capacity(iterations as usize * 4);
    for i in 0..iterations {
        bytes.extend_from_slice(&((i % n_scenes as u64) as u32).to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn train(
    cfg: &RunConfig,
    dataset: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let (_, scenes) = synthdata::read_dataset(dataset)?;
    if scenes.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    fs::create_dir_all(out_dir)?;

    let (mut model, start_iteration) = match resume {
        Some(path) => {
            let (model, iter) = checkpoint::load(path)?;
            if model.cfg.architecture_fingerprint() != cfg.architecture_fingerprint() {
                return Err(Error::Contract(format!(
                    "checkpoint architecture {} is incompatible with requested {}",
                    model.cfg.architecture_fingerprint(),
                    cfg.architecture_fingerprint()
                )));
            }
            if model.cfg.seed != cfg.seed {
                return Err(Error::Contract(format!(
                    "checkpoint seed {} differs from requested seed {}",
                    model.cfg.seed, cfg.seed
                )));
            }
            let mut model = model;
            model.cfg = cfg.clone();
            (model, iter)
        }
        None => (Model::init(cfg)?, 0),
    };

    let log_path = out_dir.join("loss_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "{LOSS_LOG_HEADER}")?;

    let mut first_total = f64::NAN;
    let mut final_total = f64::NAN;
    for i in start_iteration..cfg.iterations {
        let scene = &scenes[(i % scenes.len() as u64) as usize];
        let b = train_step(&mut model, scene)?;
        if i == start_iteration {
            first_total = b.total;
        }
        final_total = b.total;
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            i, b.l_heatmap, b.l_joints, b.l_translation, b.l_hand_pose, b.l_object_pose, b.total
        )?;
    }
    log.flush()?;
    drop(log);

    let ckpt_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &model, cfg.iterations)?;
    Ok(TrainSummary {
        start_iteration,
        iterations: cfg.iterations,
        first_total,
        final_total,
        schedule_hash: schedule_hash(cfg.iterations, scenes.len()),
        checkpoint: ckpt_path,
        loss_log: log_path,
    })
}

// ── eval ─────────────────────────────────────────────────────────────

/// Per-scene predictions in plain values; the metric layer is shared by the
/// model path and oracle inputs (e.g. ground truth fed back as prediction).
#[derive(Clone, Debug)]
pub struct ScenePrediction {
    /// Root-relative joints per hand.
    pub joints: [[[f64; 3]; NUM_JOINTS]; NUM_HANDS],
    pub rel_translation: [f64; 3],
    pub rotation: mat3::Mat3,
    pub obj_translation: [f64; 3],
}

impl ScenePrediction {
    /// Ground truth recast as a prediction (oracle input for tests).
    pub fn from_ground_truth(scene: &Scene) -> Self {
        let mut joints = [[[0.0; 3]; NUM_JOINTS]; NUM_HANDS];
        for h in 0..NUM_HANDS {
            for j in 0..NUM_JOINTS {
                for c in 0..3 {
                    joints[h][j][c] = scene.joints3d[h][j][c] - scene.joints3d[h][0][c];
                }
            }
        }
        ScenePrediction {
            joints,
            rel_translation: mat3::sub(&scene.joints3d[1][0], &scene.joints3d[0][0]),
            rotation: scene.object_rot,
            obj_translation: scene.object_trans,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub align_mode: String,
    pub mpjpe_single: Option<f64>,
    pub mpjpe_two: Option<f64>,
    pub mpjpe_all: Option<f64>,
    pub mrrpe: Option<f64>,
    pub auc: f64,
    pub mssd: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub scenes: usize,
    pub rows: Vec<EvalRow>,
}

pub const ALIGN_MODES: [&str; 3] = ["none", "scale_trans", "procrustes"];

fn align_joints(mode: &str, pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    Ok(match mode {
        "none" => pred.to_vec(),
        "scale_trans" => metrics::align_scale_translation(pred, gt)?.aligned,
        "procrustes" => metrics::procrustes_align(pred, gt)?.aligned,
        other => return Err(Error::Contract(format!("unknown alignment mode {other}"))),
    })
}

/// Metric layer shared by model evaluation and oracle tests.
pub fn evaluate_predictions(
    cfg: &RunConfig,
    scenes: &[Scene],
    preds: &[ScenePrediction],
) -> Result<Vec<EvalRow>> {
    if scenes.len() != preds.len() {
        return Err(Error::Dim(format!(
            "{} scenes vs {} predictions",
            scenes.len(),
            preds.len()
        )));
    }
    let mut rows = Vec::new();
    for mode in ALIGN_MODES {
        let mut per_scene_single = Vec::new();
        let mut per_scene_two = Vec::new();
        let mut pooled_errors = Vec::new();
        let mut mrrpes = Vec::new();
        let mut mssds = Vec::new();
        for (scene, pred) in scenes.iter().zip(preds) {
            let two = scene.hand_present[0] && scene.hand_present[1];
            let mut scene_mpjpe = Vec::new();
            for h in 0..NUM_HANDS {
                if !scene.hand_present[h] {
                    continue;
                }
                let gt: Vec<[f64; 3]> = (0..NUM_JOINTS)
                    .map(|j| {
                        [
                            scene.joints3d[h][j][0] - scene.joints3d[h][0][0],
                            scene.joints3d[h][j][1] - scene.joints3d[h][0][1],
                            scene.joints3d[h][j][2] - scene.joints3d[h][0][2],
                        ]
                    })
                    .collect();
                let p: Vec<[f64; 3]> = pred.joints[h].to_vec();
                let aligned = align_joints(mode, &p, &gt)?;
                scene_mpjpe.push(metrics::mpjpe(&aligned, &gt)?);
                for (a, g) in aligned.iter().zip(&gt) {
                    pooled_errors.push(mat3::dist(a, g));
                }
            }
            let mean_scene =
                scene_mpjpe.iter().sum::<f64>() / scene_mpjpe.len().max(1) as f64;
            if two {
                per_scene_two.push(mean_scene);
                let zero = [0.0; 3];
                let rel_gt = mat3::sub(&scene.joints3d[1][0], &scene.joints3d[0][0]);
                mrrpes.push(metrics::mrrpe(&zero, &pred.rel_translation, &zero, &rel_gt));
            } else {
                per_scene_single.push(mean_scene);
            }
            let verts: Vec<[f64; 3]> = scene.corners.to_vec();
            mssds.push(metrics::mssd(
                &pred.rotation,
                &pred.obj_translation,
                &scene.object_rot,
                &scene.object_trans,
                &verts,
                &Scene::symmetries(),
            )?);
        }
        let mean = |v: &[f64]| -> Option<f64> {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let all: Vec<f64> =
            per_scene_single.iter().chain(per_scene_two.iter()).cloned().collect();
        rows.push(EvalRow {
            align_mode: mode.to_string(),
            mpjpe_single: mean(&per_scene_single),
            mpjpe_two: mean(&per_scene_two),
            mpjpe_all: mean(&all),
            mrrpe: mean(&mrrpes),
            auc: metrics::auc_joint_error(&pooled_errors, cfg.auc_max, cfg.auc_steps),
            mssd: mean(&mssds).unwrap_or(0.0),
        });
    }
    Ok(rows)
}

/// Run the model over every scene and collect plain-value predictions.
pub fn predict_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut tape = Tape::new();
        let r = model.run(&mut tape, scene, None)?;
        let pose = PoseOutput::from_vars(&tape, &r.fwd.pose);
        out.push(ScenePrediction {
            joints: pose.joints,
            rel_translation: pose.rel_translation,
            rotation: pose.rotation,
            obj_translation: pose.obj_translation,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut text = String::from("align_mode,mpjpe_single,mpjpe_two,mpjpe_all,mrrpe,auc,mssd\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.align_mode,
            fmt_opt(r.mpjpe_single),
            fmt_opt(r.mpjpe_two),
            fmt_opt(r.mpjpe_all),
            fmt_opt(r.mrrpe),
            r.auc,
            r.mssd
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub scenes: usize,
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
}

pub fn eval(
    checkpoint_path: &Path,
    dataset: &Path,
    out_dir: &Path,
    cfg_override: Option<&RunConfig>,
) -> Result<EvalSummary> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let cfg = match cfg_override {
        Some(c) => {
            if c.architecture_fingerprint() != model.cfg.architecture_fingerprint() {
                return Err(Error::Contract(format!(
                    "requested config {} is incompatible with checkpoint {}",
                    c.architecture_fingerprint(),
                    model.cfg.architecture_fingerprint()
                )));
            }
            c.clone()
        }
        None => model.cfg.clone(),
    };
    let (_, scenes) = synthdata::read_dataset(dataset)?;
    let preds = predict_scenes(&model, &scenes)?;
    let rows = evaluate_predictions(&cfg, &scenes, &preds)?;
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("report.csv");
    let json_path = out_dir.join("report.json");
    write_eval_csv(&csv_path, &rows)?;
    let report = EvalReport { config: cfg, scenes: scenes.len(), rows: rows.clone() };
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(EvalSummary { rows, scenes: scenes.len(), report_csv: csv_path, report_json: json_path })
}

// ── ablate ───────────────────────────────────────────────────────────

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("w/ CIET", true, false),
    ("w/ sigmoid att.", false, true),
    ("w/ CIET & sigmoid att.", true, true),
];

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub variant: String,
    pub joint_err_scale_trans: f64,
    pub auc_scale_trans: f64,
    pub joint_err_procrustes: f64,
    pub auc_procrustes: f64,
    pub schedule_hash: String,
}

#[derive(Debug, Serialize)]
pub struct AblateReport {
    pub config: RunConfig,
    pub rows: Vec<AblateRow>,
}

/// Train and evaluate the three architecture variants under identical
/// seeds, schedules and budgets.
pub fn ablate(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<AblateReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let (_, scenes) = synthdata::read_dataset(dataset)?;
    let mut rows = Vec::new();
    for (i, (label, use_ciet, use_sigmoid)) in ABLATION_VARIANTS.iter().enumerate() {
        let mut vcfg = cfg.clone();
        vcfg.use_ciet = *use_ciet;
        vcfg.use_sigmoid_attention = *use_sigmoid;
        let vdir = out_dir.join(format!("variant_{i}"));
        let summary = train(&vcfg, dataset, &vdir, None)?;
        let (model, _) = checkpoint::load(&summary.checkpoint)?;
        let preds = predict_scenes(&model, &scenes)?;
        let eval_rows = evaluate_predictions(&vcfg, &scenes, &preds)?;
        let pick = |mode: &str| -> (f64, f64) {
            let r = eval_rows.iter().find(|r| r.align_mode == mode).unwrap();
            (r.mpjpe_all.unwrap_or(f64::NAN), r.auc)
        };
        let (st_err, st_auc) = pick("scale_trans");
        let (pr_err, pr_auc) = pick("procrustes");
        rows.push(AblateRow {
            variant: label.to_string(),
            joint_err_scale_trans: st_err,
            auc_scale_trans: st_auc,
            joint_err_procrustes: pr_err,
            auc_procrustes: pr_auc,
            schedule_hash: summary.schedule_hash,
        });
    }
    let mut csv = String::from(
        "variant,joint_err_scale_trans,auc_scale_trans,joint_err_procrustes,auc_procrustes,schedule_hash\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.joint_err_scale_trans,
            r.auc_scale_trans,
            r.joint_err_procrustes,
            r.auc_procrustes,
            r.schedule_hash
        ));
    }
    fs::write(out_dir.join("ablation.csv"), csv)?;
    let report = AblateReport { config: cfg.clone(), rows };
    fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(report)
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Finite-difference audit of every parameter group on a single scene.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    gradcheck_with_corruption(cfg, None)
}

/// Test hook: corrupt one named group's analytic gradient to verify the
/// audit reports failures.
pub fn gradcheck_with_corruption(
    cfg: &RunConfig,
    corrupt: Option<&str>,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let model = Model::init(cfg)?;
    let scene = synthdata::generate_scene(scene_seed(cfg.seed, 0), &cfg.scene_config());
    let rows = gradient_audit(&model, &scene, corrupt)?;
    let max_rel_err = rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    Ok(GradcheckReport { rows, max_rel_err, pass: max_rel_err <= GRADCHECK_THRESHOLD })
}

// ── overfit accuracy (used by the acceptance suite) ──────────────────

#[derive(Debug, Serialize)]
pub struct AccuracyReport {
    /// Fraction of visible joints whose predicted heatmap argmax lies
    /// within one grid pixel of the ground-truth position.
    pub heatmap_peak_acc: f64,
    /// Fraction of tokens whose identity argmax matches the assigned label.
    pub identity_acc: f64,
    /// Mean per-hand MPJPE after Procrustes alignment, synthetic-mm.
    pub mpjpe_procrustes: f64,
    pub visible_joints: usize,
    pub tokens: usize,
}

pub fn pipeline_accuracy(model: &Model, scenes: &[Scene]) -> Result<AccuracyReport> {
    let mut peak_hits = 0usize;
    let mut visible_joints = 0usize;
    let mut ident_hits = 0usize;
    let mut tokens = 0usize;
    let mut mpjpes = Vec::new();
    for scene in scenes {
        let mut tape = Tape::new();
        let r = model.run(&mut tape, scene, None)?;
        let hm = tape.data(r.fwd.heatmaps);
        for h in 0..NUM_HANDS {
            if !scene.hand_present[h] {
                continue;
            }
            for j in 0..NUM_JOINTS {
                if !scene.visibility[h][j] {
                    continue;
                }
                visible_joints += 1;
                let ch = h * NUM_JOINTS + j;
                let mut best = (0usize, 0usize, f64::MIN);
                for y in 0..GRID {
                    for x in 0..GRID {
                        let v = hm.at3(y, x, ch);
                        if v > best.2 {
                            best = (x, y, v);
                        }
                    }
                }
                let gu = scene.joints2d[h][j][0] / 2.0;
                let gv = scene.joints2d[h][j][1] / 2.0;
                let dist = ((best.0 as f64 - gu).powi(2) + (best.1 as f64 - gv).powi(2)).sqrt();
                if dist <= 1.0 {
                    peak_hits += 1;
                }
            }
        }
        let probs = tape.data(r.fwd.ident_probs);
        let k = crate::NUM_IDENTITY_CLASSES;
        for (t, &label) in r.fwd.labels.iter().enumerate() {
            tokens += 1;
            let row = &probs.data()[t * k..(t + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == label {
                ident_hits += 1;
            }
        }
        let pose = PoseOutput::from_vars(&tape, &r.fwd.pose);
        for h in 0..NUM_HANDS {
            if !scene.hand_present[h] {
                continue;
            }
            let gt: Vec<[f64; 3]> = (0..NUM_JOINTS)
                .map(|j| {
                    [
                        scene.joints3d[h][j][0] - scene.joints3d[h][0][0],
                        scene.joints3d[h][j][1] - scene.joints3d[h][0][1],
                        scene.joints3d[h][j][2] - scene.joints3d[h][0][2],
                    ]
                })
                .collect();
            let aligned = metrics::procrustes_align(&pose.joints[h], &gt)?.aligned;
            mpjpes.push(metrics::mpjpe(&aligned, &gt)?);
        }
    }
    Ok(AccuracyReport {
        heatmap_peak_acc: peak_hits as f64 / visible_joints.max(1) as f64,
        identity_acc: ident_hits as f64 / tokens.max(1) as f64,
        mpjpe_procrustes: mpjpes.iter().sum::<f64>() / mpjpes.len().max(1) as f64,
        visible_joints,
        tokens,
    })
}
