//! The end-to-end multi-view pipeline: matching, pairwise two-view poses,
//! spanning-tree initialization, averaging, global refinement, and AUC over
//! all pairs of each tuple.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::auc::{auc, AucReport, PairErrorRecord};
use super::averaging::{
    poses_from_rotations_and_centers, rotation_averaging, translation_averaging,
};
use super::globalba::global_bundle_adjust;
use super::graph::{max_spanning_tree, PoseGraph, PoseGraphEdge};
use super::MultiviewError;
use crate::autodiff::Tape;
use crate::geometry::{
    essential_from_pose, pose_error, symmetric_epipolar_distance, RelativePose,
    EPIPOLAR_INLIER_THRESHOLD,
};
use crate::matcher::{match_tuple, FrameNodes, MatchMode, MatcherConfig, MatcherWeights};
use crate::posesolver::{
    bundle_adjust, recover_pose, weighted_eight_point, BaConfig, MatchNodes, RecoveryMode,
    WeightedMatches,
};
use crate::synthdata::TupleSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoViewSolver {
    EightPoint,
    EightPointWithBa,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub mode: MatchMode,
    pub solver: TwoViewSolver,
    pub ba: BaConfig,
    /// Optional confidence threshold on matches (absent by default).
    pub conf_threshold: Option<f64>,
    /// Run the global refinement stage.
    pub global_ba: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: MatchMode::Joint,
            solver: TwoViewSolver::EightPointWithBa,
            ba: BaConfig::test_time(),
            conf_threshold: None,
            global_ba: true,
        }
    }
}

/// Per-tuple diagnostics for the report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TupleDiagnostics {
    pub tuple: usize,
    pub edges_estimated: usize,
    pub edges_dropped: usize,
    pub pipeline_error: Option<String>,
}

/// Estimates relative poses for every pair with at least eight matches.
/// Pairs that fail the solver are dropped with a diagnostic count.
pub fn pairwise_poses(
    tuple: &TupleSample,
    weights: &MatcherWeights,
    mcfg: &MatcherConfig,
    cfg: &PipelineConfig,
) -> Result<(Vec<PoseGraphEdge>, usize), MultiviewError> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
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
    let out = match_tuple(&mut tape, &frames, &bound, mcfg, cfg.mode)?;

    let mut edges = Vec::new();
    let mut dropped = 0usize;
    for pair in &out.pairs {
        let Some(wn) = pair.weights_node else {
            dropped += 1;
            continue;
        };
        let conf = tape.value(wn).data().to_vec();
        let mut wm = WeightedMatches::default();
        let mut indices = Vec::new();
        let fa = &tuple.frames[pair.a];
        let fb = &tuple.frames[pair.b];
        for (k, &(i, j, _)) in pair.matches.iter().enumerate() {
            if cfg.conf_threshold.is_some_and(|t| conf[k] < t) {
                continue;
            }
            wm.push(
                Vector2::new(fa.keypoints.coords[i][0], fa.keypoints.coords[i][1]),
                Vector2::new(fb.keypoints.coords[j][0], fb.keypoints.coords[j][1]),
                conf[k],
            );
            indices.push((i, j));
        }
        if wm.len() < 8 {
            dropped += 1;
            continue;
        }
        let nodes = MatchNodes::from_weighted(&mut tape, &wm, false, false);
        let Ok(f) = weighted_eight_point(&mut tape, &nodes) else {
            dropped += 1;
            continue;
        };
        let pairs_px: Vec<_> = wm
            .x_a
            .iter()
            .zip(wm.x_b.iter())
            .map(|(a, b)| (*a, *b))
            .collect();
        let Ok((pose8, _, _)) = recover_pose(
            &mut tape,
            f,
            &pairs_px,
            &fa.intrinsics,
            &fb.intrinsics,
            RecoveryMode::Cheirality,
        ) else {
            dropped += 1;
            continue;
        };
        let pose = match cfg.solver {
            TwoViewSolver::EightPoint => pose8,
            TwoViewSolver::EightPointWithBa => {
                match bundle_adjust(&mut tape, &pose8, &nodes, &fa.intrinsics, &fb.intrinsics, &cfg.ba)
                {
                    Ok(r) => r.pose,
                    Err(_) => pose8,
                }
            }
        };
        // Inliers by symmetric epipolar distance on normalized coordinates.
        let e = essential_from_pose(&pose.pose);
        let mut mask = Vec::with_capacity(wm.len());
        let mut inliers = 0usize;
        for k in 0..wm.len() {
            let na = fa.intrinsics.normalized(&wm.x_a[k]);
            let nb = fb.intrinsics.normalized(&wm.x_b[k]);
            let d = symmetric_epipolar_distance(&e, &na, &nb);
            let ok = d < EPIPOLAR_INLIER_THRESHOLD;
            mask.push(ok);
            inliers += ok as usize;
        }
        edges.push(PoseGraphEdge {
            a: pair.a,
            b: pair.b,
            pose,
            inliers,
            matches: wm,
            inlier_mask: mask,
            indices,
        });
    }
    Ok((edges, dropped))
}

/// Runs the full pipeline for one tuple; returns final absolute poses.
pub fn solve_tuple(
    tuple: &TupleSample,
    weights: &MatcherWeights,
    mcfg: &MatcherConfig,
    cfg: &PipelineConfig,
) -> Result<(PoseGraph, usize), MultiviewError> {
    let n = tuple.frames.len();
    let (edges, dropped) = pairwise_poses(tuple, weights, mcfg, cfg)?;
    let (_, init) = max_spanning_tree(n, &edges)?;
    let rot = rotation_averaging(n, &edges, &init);
    let centers = translation_averaging(n, &edges, &rot.rotations)?;
    let averaged = poses_from_rotations_and_centers(&rot.rotations, &centers);
    let mut graph = PoseGraph {
        n_frames: n,
        edges,
        absolute: averaged,
    };
    if cfg.global_ba {
        let keypoints: Vec<Vec<[f64; 2]>> = tuple
            .frames
            .iter()
            .map(|f| f.keypoints.coords.clone())
            .collect();
        let intrinsics: Vec<_> = tuple.frames.iter().map(|f| f.intrinsics).collect();
        graph.absolute = global_bundle_adjust(&graph, &keypoints, &intrinsics, &cfg.ba)?;
    }
    Ok((graph, dropped))
}

/// Evaluates the pipeline over a dataset: per-pair rotation and translation
/// angle errors against ground truth, aggregated into AUC at the standard
/// thresholds. Failed tuples score 180° on all their pairs.
pub fn evaluate_tuples(
    tuples: &[TupleSample],
    weights: &MatcherWeights,
    mcfg: &MatcherConfig,
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> (AucReport, Vec<TupleDiagnostics>) {
    let mut per_pair = Vec::new();
    let mut diagnostics = Vec::new();
    for (ti, tuple) in tuples.iter().enumerate() {
        let n = tuple.frames.len();
        let mut diag = TupleDiagnostics {
            tuple: ti,
            ..Default::default()
        };
        match solve_tuple(tuple, weights, mcfg, cfg) {
            Ok((graph, dropped)) => {
                diag.edges_estimated = graph.edges.len();
                diag.edges_dropped = dropped;
                for a in 0..n {
                    for b in a + 1..n {
                        let est = RelativePose::up_to_scale(
                            graph.absolute[b].compose(&graph.absolute[a].inverse()),
                        );
                        let gt = tuple.relative_gt(a, b);
                        let e = pose_error(&est, &gt);
                        per_pair.push(PairErrorRecord {
                            tuple: ti,
                            a,
                            b,
                            rot_deg: e.rot_deg,
                            transl_deg: e.transl_deg.unwrap_or(180.0),
                        });
                    }
                }
            }
            Err(err) => {
                diag.pipeline_error = Some(err.to_string());
                for a in 0..n {
                    for b in a + 1..n {
                        per_pair.push(PairErrorRecord {
                            tuple: ti,
                            a,
                            b,
                            rot_deg: 180.0,
                            transl_deg: 180.0,
                        });
                    }
                }
            }
        }
        diagnostics.push(diag);
    }
    let rot: Vec<f64> = per_pair.iter().map(|p| p.rot_deg).collect();
    let transl: Vec<f64> = per_pair.iter().map(|p| p.transl_deg).collect();
    let report = AucReport {
        thresholds_deg: thresholds.to_vec(),
        rot_auc: auc(&rot, thresholds),
        transl_auc: auc(&transl, thresholds),
        per_pair,
    };
    (report, diagnostics)
}
