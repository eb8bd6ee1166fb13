//! The differentiability verification suite: finite-difference checks for
//! the Sinkhorn assignment, the weighted eight-point solve, the unrolled
//! bundle adjustment, and the full stage-2 loss with respect to the matcher
//! weights on a micro instance.

use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{match_loss, pose_loss_tape};
use super::TrainError;
use crate::autodiff::{gradcheck_at, DiffError, Tape, Tensor};
use crate::geometry::{CameraIntrinsics, Pose, RelativePose};
use crate::matcher::{
    log_sinkhorn, match_tuple, FrameNodes, MatchMode, MatcherConfig, MatcherWeights,
};
use crate::posesolver::{
    bundle_adjust, recover_pose, weighted_eight_point, BaConfig, MatchNodes, RecoveryMode,
    WeightedMatches,
};
use crate::synthdata::{generate_scene, render_tuple, RenderParams, SceneConfig, TupleSample};

/// One line of the verification report.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn test_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(480.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
}

fn synthetic_matches(seed: u64, n: usize, noise: f64) -> (WeightedMatches, RelativePose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = test_camera();
    let mut rel = Pose::exp(&Vector6::new(1.0, 0.12, 0.25, 0.06, -0.3, 0.12));
    rel.t = rel.t.normalize();
    let mut out = WeightedMatches::default();
    while out.len() < n {
        let y = Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.1..1.1),
            rng.random_range(2.5..6.0),
        );
        let yb = rel.act(&y);
        if yb.z <= 0.1 {
            continue;
        }
        let (Ok(xa), Ok(xb)) = (k.project(&y), k.project(&yb)) else {
            continue;
        };
        if !k.contains(&xa) || !k.contains(&xb) {
            continue;
        }
        out.push(
            Vector2::new(xa.x + noise * normal(&mut rng), xa.y + noise * normal(&mut rng)),
            Vector2::new(xb.x + noise * normal(&mut rng), xb.y + noise * normal(&mut rng)),
            rng.random_range(0.5..1.0),
        );
    }
    (out, RelativePose::up_to_scale(rel))
}

/// Sinkhorn assignment gradient with respect to the raw scores.
pub fn check_sinkhorn(step: f64) -> Result<CheckResult, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let scores = Tensor::new(
        vec![6, 8],
        (0..48).map(|_| rng.random_range(-1.5..1.5)).collect(),
    );
    let probe = Tensor::new(
        vec![7, 9],
        (0..63).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let err = crate::autodiff::gradcheck(
        move |tape, s| {
            let bin = tape.constant(Tensor::scalar(0.4));
            let log_p = log_sinkhorn(tape, s, bin, 25).map_err(|e| match e {
                crate::matcher::MatcherError::Diff(d) => d,
                _ => DiffError::NonFinite { op: "sinkhorn" },
            })?;
            let p = tape.exp(log_p)?;
            let pr = tape.constant(probe.clone());
            tape.dot(p, pr)
        },
        &scores,
        step,
    )?;
    Ok(CheckResult {
        name: "sinkhorn",
        max_error: err,
        tolerance: 1e-4,
    })
}

/// Weighted eight-point gradient with respect to confidence weights and
/// match coordinates.
pub fn check_eight_point(step: f64) -> Result<CheckResult, DiffError> {
    let (matches, _) = synthetic_matches(202, 12, 1.0);
    let probe = Tensor::new(vec![3, 3], (0..9).map(|i| 0.15 * (i as f64 + 1.0)).collect());

    let w0 = Tensor::vector(matches.w.clone());
    let (xa, xb) = (matches.x_a.clone(), matches.x_b.clone());
    let probe_w = probe.clone();
    let coords: Vec<usize> = (0..w0.numel()).collect();
    let err_w = gradcheck_at(
        move |tape, w| {
            let mut m = WeightedMatches::default();
            for i in 0..xa.len() {
                m.push(xa[i], xb[i], 1.0);
            }
            let mut nodes = MatchNodes::from_weighted(tape, &m, false, false);
            nodes.w = w;
            let f = weighted_eight_point(tape, &nodes)
                .map_err(|_| DiffError::NonFinite { op: "8pt" })?;
            let p = tape.constant(probe_w.clone());
            let fp = tape.mul(f, p)?;
            Ok(tape.sum_all(fp))
        },
        &w0,
        step,
        &coords,
    )?;

    let mut coord_data = Vec::new();
    for p in &matches.x_a {
        coord_data.push(p.x);
        coord_data.push(p.y);
    }
    let xa0 = Tensor::matrix(matches.len(), 2, coord_data);
    let (xb, w) = (matches.x_b.clone(), matches.w.clone());
    let subset: Vec<usize> = (0..xa0.numel()).step_by(3).collect();
    let err_x = gradcheck_at(
        move |tape, xa| {
            let mut m = WeightedMatches::default();
            for i in 0..xb.len() {
                m.push(Vector2::zeros(), xb[i], w[i]);
            }
            let mut nodes = MatchNodes::from_weighted(tape, &m, false, false);
            nodes.x_a = xa;
            let f = weighted_eight_point(tape, &nodes)
                .map_err(|_| DiffError::NonFinite { op: "8pt" })?;
            let p = tape.constant(probe.clone());
            let fp = tape.mul(f, p)?;
            Ok(tape.sum_all(fp))
        },
        &xa0,
        step,
        &subset,
    )?;

    Ok(CheckResult {
        name: "eight_point",
        max_error: err_w.max(err_x),
        tolerance: 1e-3,
    })
}

/// T=5 unrolled bundle adjustment gradient with respect to the match inputs
/// (coordinates and weights together).
pub fn check_bundle_adjust(step: f64) -> Result<CheckResult, DiffError> {
    let (matches, gt) = synthetic_matches(303, 10, 1.0);
    let k = test_camera();
    let init = {
        let xi = Vector6::new(0.01, -0.015, 0.01, 0.012, -0.008, 0.015);
        RelativePose::up_to_scale(Pose::exp(&xi).compose(&gt.pose))
    };
    let cfg = BaConfig::train_time();
    let n = matches.len();
    // Pack [x_a | x_b | w] into one input tensor so one check covers both.
    let mut packed = Vec::new();
    for p in &matches.x_a {
        packed.push(p.x);
        packed.push(p.y);
    }
    for p in &matches.x_b {
        packed.push(p.x);
        packed.push(p.y);
    }
    packed.extend_from_slice(&matches.w);
    let input = Tensor::vector(packed);
    let subset: Vec<usize> = (0..input.numel()).step_by(4).collect();
    let err = gradcheck_at(
        move |tape, packed| {
            let xa_flat = tape.slice_vec(packed, 0, 2 * n)?;
            let xa = tape.reshape(xa_flat, vec![n, 2])?;
            let xb_flat = tape.slice_vec(packed, 2 * n, 4 * n)?;
            let xb = tape.reshape(xb_flat, vec![n, 2])?;
            let w = tape.slice_vec(packed, 4 * n, 5 * n)?;
            let nodes = MatchNodes { x_a: xa, x_b: xb, w };
            let result = bundle_adjust(tape, &init, &nodes, &k, &k, &cfg)
                .map_err(|_| DiffError::NonFinite { op: "ba" })?;
            let probe_r = tape.constant(Tensor::matrix(
                3,
                3,
                vec![0.3, -0.2, 0.1, 0.05, 0.4, -0.15, 0.2, 0.1, -0.3],
            ));
            let rp = tape.mul(result.r_node, probe_r)?;
            let a = tape.sum_all(rp);
            let norm = tape.norm2(result.t_node)?;
            let inv = tape.recip(norm)?;
            let tu = tape.scale_t(result.t_node, inv)?;
            let probe_t = tape.constant(Tensor::vector(vec![0.7, -0.4, 0.5]));
            let b = tape.dot(tu, probe_t)?;
            tape.add(a, b)
        },
        &input,
        step,
        &subset,
    )?;
    Ok(CheckResult {
        name: "bundle_adjust",
        max_error: err,
        tolerance: 1e-2,
    })
}

/// Builds the micro fixture for the full-loss check: 2 frames, 6 keypoints,
/// D = 8.
pub fn micro_tuple(seed: u64) -> Result<(TupleSample, MatcherConfig), TrainError> {
    let mcfg = MatcherConfig::micro();
    let scene_cfg = SceneConfig {
        landmarks: 30,
        cameras: 2,
        keypoints_per_frame: 6,
        min_visible: 8,
        descriptor_dim: mcfg.descriptor_dim,
        overlap_range: (0.0, 1.0),
        window_widths: vec![(2, 1.0)],
        ..SceneConfig::toy()
    };
    let scene = generate_scene(&scene_cfg, seed)
        .map_err(|e| TrainError::Labels(e.to_string()))?;
    let params = RenderParams {
        noise_px: 0.8,
        desc_noise: 0.15,
        outlier_frac: 0.0,
        ..RenderParams::toy()
    };
    let tuple =
        render_tuple(&scene, &params, seed ^ 0xABCD).map_err(|e| TrainError::Labels(e.to_string()))?;
    Ok((tuple, mcfg))
}

/// Full stage-2 loss gradient with respect to the matcher weights on the
/// micro instance, checked on a spread of parameter coordinates.
pub fn check_total_loss(step: f64) -> Result<CheckResult, TrainError> {
    let (tuple, mcfg) = micro_tuple(11)?;
    let weights = MatcherWeights::init(&mcfg, 3);
    let (lambda_match, lambda_pose, lambda_rot) = (0.7, 2.0, 1.0);

    let eval = |w: &MatcherWeights,
                trainable: bool|
     -> Result<(f64, Option<Vec<Option<Tensor>>>), TrainError> {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape, trainable);
        let frames: Vec<FrameNodes> = tuple
            .frames
            .iter()
            .map(|f| {
                FrameNodes::from_keypoints(
                    &mut tape,
                    &f.keypoints,
                    (f.intrinsics.width, f.intrinsics.height),
                    false,
                )
            })
            .collect::<Result<_, _>>()?;
        let out = match_tuple(&mut tape, &frames, &bound, &mcfg, MatchMode::Joint)?;
        let pair = &out.pairs[0];
        let labels = tuple.labels_for(0, 1).expect("pair labels");
        let ml = match_loss(&mut tape, pair.log_p, labels)?;
        let mut total = tape.scale(ml.loss, lambda_match);
        if let Some(wn) = pair.weights_node {
            if pair.matches.len() >= 8 {
                let fa = &tuple.frames[0];
                let fb = &tuple.frames[1];
                let mut xa = Tensor::zeros(vec![pair.matches.len(), 2]);
                let mut xb = Tensor::zeros(vec![pair.matches.len(), 2]);
                let mut px = Vec::new();
                for (row, &(i, j, _)) in pair.matches.iter().enumerate() {
                    xa.set(row, 0, fa.keypoints.coords[i][0]);
                    xa.set(row, 1, fa.keypoints.coords[i][1]);
                    xb.set(row, 0, fb.keypoints.coords[j][0]);
                    xb.set(row, 1, fb.keypoints.coords[j][1]);
                    px.push((
                        Vector2::new(fa.keypoints.coords[i][0], fa.keypoints.coords[i][1]),
                        Vector2::new(fb.keypoints.coords[j][0], fb.keypoints.coords[j][1]),
                    ));
                }
                let nodes = MatchNodes {
                    x_a: tape.constant(xa),
                    x_b: tape.constant(xb),
                    w: wn,
                };
                let gt = tuple.relative_gt(0, 1);
                if let Ok(f) = weighted_eight_point(&mut tape, &nodes) {
                    if let Ok((_, sel, _)) = recover_pose(
                        &mut tape,
                        f,
                        &px,
                        &fa.intrinsics,
                        &fb.intrinsics,
                        RecoveryMode::ClosestToGt(&gt),
                    ) {
                        let pl = pose_loss_tape(&mut tape, sel, &gt, lambda_rot)?;
                        let pl_scaled = tape.scale(pl, lambda_pose);
                        total = tape.add(total, pl_scaled)?;
                    }
                }
            }
        }
        let value = tape.value(total).item();
        if trainable {
            tape.backward(total)?;
            let grads = bound
                .ordered()
                .iter()
                .map(|&id| tape.grad(id).cloned())
                .collect();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = eval(&weights, true)?;
    let grads = grads.unwrap();
    // Probe a deterministic spread of coordinates across all parameters.
    let mut max_err: f64 = 0.0;
    let mut checked = 0usize;
    for (pi, param) in weights.params().iter().enumerate() {
        if pi % 6 != 0 && param.name != "dustbin" {
            continue;
        }
        let coord = param.tensor.numel() / 2;
        let mut plus = weights.clone();
        plus.params_mut()[pi].tensor.data_mut()[coord] += step;
        let mut minus = weights.clone();
        minus.params_mut()[pi].tensor.data_mut()[coord] -= step;
        let (fp, _) = eval(&plus, false)?;
        let (fm, _) = eval(&minus, false)?;
        let fd = (fp - fm) / (2.0 * step);
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data()[coord]);
        let err = (analytic - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
        checked += 1;
    }
    assert!(checked >= 10, "too few parameters probed");
    Ok(CheckResult {
        name: "total_loss",
        max_error: max_err,
        tolerance: 1e-2,
    })
}

/// Runs the whole verification suite.
pub fn run_all(step: f64) -> Result<Vec<CheckResult>, TrainError> {
    Ok(vec![
        check_sinkhorn(step)?,
        check_eight_point(step)?,
        check_bundle_adjust(step)?,
        check_total_loss(step)?,
    ])
}
