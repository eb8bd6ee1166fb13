//! Two-stage toy training: match loss first, then the ramped combined loss
//! with the pose term on the weighted eight-point result.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::losses::{match_loss, pose_loss_plain, pose_loss_tape};
use super::{LossSchedule, TrainError};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::pose_error;
use crate::matcher::{
    match_tuple, FrameNodes, MatchMode, MatcherConfig, MatcherWeights, TupleMatches,
};
use crate::multiview::auc;
use crate::posesolver::{
    recover_pose, weighted_eight_point, MatchNodes, RecoveryMode, SolverError,
};
use crate::synthdata::{Dataset, TupleSample};

/// Gauge anchor for the mean predicted confidence during stage 2.
const CONFIDENCE_ANCHOR: f64 = 0.7;
const CONFIDENCE_ANCHOR_WEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(&self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: MatchMode,
    pub stage: Stage,
    pub iterations: usize,
    pub schedule: LossSchedule,
    pub adam: AdamHyper,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Tuples held out from the end of the dataset for validation.
    pub val_tuples: usize,
    /// Validation cadence in iterations (an "epoch" at the dataset size).
    pub val_every: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub stage: u32,
    pub match_loss: f64,
    pub pose_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_match_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pose_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    pub skipped_pose_terms: usize,
}

pub struct TrainOutcome {
    pub weights: MatcherWeights,
    pub records: Vec<TrainRecord>,
    pub val_match_loss: f64,
    pub val_pose_loss: f64,
    pub val_auc10: f64,
}

fn frame_nodes(tape: &mut Tape, tuple: &TupleSample) -> Result<Vec<FrameNodes>, TrainError> {
    tuple
        .frames
        .iter()
        .map(|f| {
            FrameNodes::from_keypoints(
                tape,
                &f.keypoints,
                (f.intrinsics.width, f.intrinsics.height),
                false,
            )
            .map_err(TrainError::from)
        })
        .collect()
}

/// Builds the differentiable pose term for one pair from extracted matches
/// and their confidence nodes; `None` when the pair has to be skipped.
fn pose_term(
    tape: &mut Tape,
    tuple: &TupleSample,
    pair_a: usize,
    pair_b: usize,
    matches: &[(usize, usize, f64)],
    weights_node: NodeId,
    lambda_rot: f64,
) -> Option<NodeId> {
    if matches.len() < 8 {
        return None;
    }
    let fa = &tuple.frames[pair_a];
    let fb = &tuple.frames[pair_b];
    let mut xa = Tensor::zeros(vec![matches.len(), 2]);
    let mut xb = Tensor::zeros(vec![matches.len(), 2]);
    for (row, &(i, j, _)) in matches.iter().enumerate() {
        xa.set(row, 0, fa.keypoints.coords[i][0]);
        xa.set(row, 1, fa.keypoints.coords[i][1]);
        xb.set(row, 0, fb.keypoints.coords[j][0]);
        xb.set(row, 1, fb.keypoints.coords[j][1]);
    }
    // The eight-point solve is invariant to a common scaling of the
    // confidences; normalizing by the mean removes that flat direction from
    // the gradient so the pose loss separates weights instead of sinking
    // them all.
    let mean_w = tape.mean_all(weights_node);
    let inv_mean = match tape.recip(mean_w) {
        Ok(x) => x,
        Err(_) => return None,
    };
    let w_gauge = match tape.scale_t(weights_node, inv_mean) {
        Ok(x) => x,
        Err(_) => return None,
    };
    let nodes = MatchNodes {
        x_a: tape.constant(xa),
        x_b: tape.constant(xb),
        w: w_gauge,
    };
    let gt = tuple.relative_gt(pair_a, pair_b);
    let f = match weighted_eight_point(tape, &nodes) {
        Ok(f) => f,
        Err(SolverError::Diff(_) | SolverError::TooFewPositiveWeights { .. }) => return None,
        Err(_) => return None,
    };
    let pairs_px: Vec<_> = matches
        .iter()
        .map(|&(i, j, _)| {
            (
                nalgebra::Vector2::new(fa.keypoints.coords[i][0], fa.keypoints.coords[i][1]),
                nalgebra::Vector2::new(fb.keypoints.coords[j][0], fb.keypoints.coords[j][1]),
            )
        })
        .collect();
    let recovered = recover_pose(
        tape,
        f,
        &pairs_px,
        &fa.intrinsics,
        &fb.intrinsics,
        RecoveryMode::ClosestToGt(&gt),
    );
    let (_, nodes_sel, _) = match recovered {
        Ok(r) => r,
        Err(_) => return None,
    };
    pose_loss_tape(tape, nodes_sel, &gt, lambda_rot).ok()
}

struct TupleLosses {
    match_total: f64,
    pose_total: f64,
    pose_terms: usize,
    skipped: usize,
    loss_node: Option<NodeId>,
}

fn tuple_losses(
    tape: &mut Tape,
    tuple: &TupleSample,
    out: &TupleMatches,
    lambda_match: f64,
    lambda_pose: f64,
    lambda_rot: f64,
) -> Result<TupleLosses, TrainError> {
    let mut terms: Vec<NodeId> = Vec::new();
    let mut match_total = 0.0;
    let mut pose_total = 0.0;
    let mut pose_terms = 0;
    let mut skipped = 0;
    for pair in &out.pairs {
        if let Some(labels) = tuple.labels_for(pair.a, pair.b) {
            let ml = match_loss(tape, pair.log_p, labels)?;
            match_total += tape.value(ml.loss).item();
            if lambda_match != 0.0 {
                terms.push(tape.scale(ml.loss, lambda_match));
            }
        }
        if lambda_pose != 0.0 {
            let term = pair.weights_node.and_then(|wn| {
                pose_term(tape, tuple, pair.a, pair.b, &pair.matches, wn, lambda_rot)
            });
            match term {
                Some(pl) => {
                    pose_total += tape.value(pl).item();
                    pose_terms += 1;
                    terms.push(tape.scale(pl, lambda_pose));
                    // The common scale of the confidences is invisible to the
                    // (scale-invariant) pose solve; anchor the per-pair mean
                    // so that direction cannot drift during training.
                    if let Some(wn) = pair.weights_node {
                        let mean_w = tape.mean_all(wn);
                        let centered = tape.add_const(mean_w, -CONFIDENCE_ANCHOR);
                        let sq = tape.mul(centered, centered)?;
                        terms.push(tape.scale(sq, CONFIDENCE_ANCHOR_WEIGHT));
                    }
                }
                None => skipped += 1,
            }
        }
    }
    let mut loss_node: Option<NodeId> = None;
    for t in terms {
        loss_node = Some(match loss_node {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    Ok(TupleLosses {
        match_total,
        pose_total,
        pose_terms,
        skipped,
        loss_node,
    })
}

/// Validation metrics: mean match loss, mean pose loss (weighted eight-point
/// with cheirality selection) and pose AUC@10° over all pairs.
pub fn validate(
    dataset: &[TupleSample],
    weights: &MatcherWeights,
    config: &MatcherConfig,
    mode: MatchMode,
    lambda_rot: f64,
) -> Result<(f64, f64, f64), TrainError> {
    let mut match_sum = 0.0;
    let mut match_n = 0usize;
    let mut pose_sum = 0.0;
    let mut pose_n = 0usize;
    let mut errors = Vec::new();
    for tuple in dataset {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let frames = frame_nodes(&mut tape, tuple)?;
        let out = match_tuple(&mut tape, &frames, &bound, config, mode)?;
        for pair in &out.pairs {
            if let Some(labels) = tuple.labels_for(pair.a, pair.b) {
                let ml = match_loss(&mut tape, pair.log_p, labels)?;
                match_sum += tape.value(ml.loss).item();
                match_n += 1;
            }
            let gt = tuple.relative_gt(pair.a, pair.b);
            let est = estimate_pair_pose(&mut tape, tuple, pair);
            match est {
                Some(pose) => {
                    pose_sum += pose_loss_plain(&pose, &gt, lambda_rot);
                    pose_n += 1;
                    let e = pose_error(&pose, &gt);
                    errors.push(e.max_deg());
                }
                None => errors.push(180.0),
            }
        }
    }
    let auc10 = auc(&errors, &[10.0])[0];
    Ok((
        match_sum / match_n.max(1) as f64,
        pose_sum / pose_n.max(1) as f64,
        auc10,
    ))
}

fn estimate_pair_pose(
    tape: &mut Tape,
    tuple: &TupleSample,
    pair: &crate::matcher::PairAssignment,
) -> Option<crate::geometry::RelativePose> {
    if pair.matches.len() < 8 {
        return None;
    }
    let wn = pair.weights_node?;
    let fa = &tuple.frames[pair.a];
    let fb = &tuple.frames[pair.b];
    let mut xa = Tensor::zeros(vec![pair.matches.len(), 2]);
    let mut xb = Tensor::zeros(vec![pair.matches.len(), 2]);
    let mut pairs_px = Vec::with_capacity(pair.matches.len());
    for (row, &(i, j, _)) in pair.matches.iter().enumerate() {
        xa.set(row, 0, fa.keypoints.coords[i][0]);
        xa.set(row, 1, fa.keypoints.coords[i][1]);
        xb.set(row, 0, fb.keypoints.coords[j][0]);
        xb.set(row, 1, fb.keypoints.coords[j][1]);
        pairs_px.push((
            nalgebra::Vector2::new(fa.keypoints.coords[i][0], fa.keypoints.coords[i][1]),
            nalgebra::Vector2::new(fb.keypoints.coords[j][0], fb.keypoints.coords[j][1]),
        ));
    }
    let nodes = MatchNodes {
        x_a: tape.constant(xa),
        x_b: tape.constant(xb),
        w: wn,
    };
    let f = weighted_eight_point(tape, &nodes).ok()?;
    let (pose, _, _) = recover_pose(
        tape,
        f,
        &pairs_px,
        &fa.intrinsics,
        &fb.intrinsics,
        RecoveryMode::Cheirality,
    )
    .ok()?;
    Some(pose)
}

/// Runs one training stage over the dataset. Deterministic given the seed:
/// tuples are visited cyclically, all randomness is in the weight init.
pub fn train_toy(
    dataset: &Dataset,
    matcher_config: &MatcherConfig,
    init: Option<MatcherWeights>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let n_total = dataset.tuples.len();
    let n_val = config.val_tuples.min(n_total.saturating_sub(1));
    let (train_set, val_set) = dataset.tuples.split_at(n_total - n_val);
    let mut weights =
        init.unwrap_or_else(|| MatcherWeights::init(matcher_config, config.seed));
    let mut adam_state = AdamState::for_weights(&weights);
    let mut records = Vec::new();

    for iteration in 0..config.iterations {
        let tuple = &train_set[iteration % train_set.len()];
        let (lambda_match, lambda_pose) =
            config.schedule.weights_at(iteration, config.stage);

        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, true);
        let frames = frame_nodes(&mut tape, tuple)?;
        let out = match_tuple(&mut tape, &frames, &bound, matcher_config, config.mode)?;
        let losses = tuple_losses(
            &mut tape,
            tuple,
            &out,
            lambda_match,
            lambda_pose,
            config.schedule.lambda_rot,
        )?;

        if let Some(loss) = losses.loss_node {
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { iteration });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor>> = bound
                .ordered()
                .iter()
                .map(|&id| tape.grad(id).cloned())
                .collect();
            clip_global_norm(&mut grads, config.grad_clip);
            adam_step(&mut weights, &grads, &mut adam_state, &config.adam);
        }

        let mut record = TrainRecord {
            iteration,
            stage: config.stage.number(),
            match_loss: losses.match_total / out.pairs.len().max(1) as f64,
            pose_loss: losses.pose_total / losses.pose_terms.max(1) as f64,
            val_match_loss: None,
            val_pose_loss: None,
            val_auc: None,
            skipped_pose_terms: losses.skipped,
        };
        let last = iteration + 1 == config.iterations;
        if (iteration + 1) % config.val_every == 0 || last {
            let (vm, vp, vauc) = validate(
                val_set,
                &weights,
                matcher_config,
                config.mode,
                config.schedule.lambda_rot,
            )?;
            record.val_match_loss = Some(vm);
            record.val_pose_loss = Some(vp);
            record.val_auc = Some(vauc);
        }
        records.push(record);
    }

    let (vm, vp, vauc) = validate(
        val_set,
        &weights,
        matcher_config,
        config.mode,
        config.schedule.lambda_rot,
    )?;
    Ok(TrainOutcome {
        weights,
        records,
        val_match_loss: vm,
        val_pose_loss: vp,
        val_auc10: vauc,
    })
}

fn clip_global_norm(grads: &mut [Option<Tensor>], clip: f64) {
    let norm2: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = norm2.sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}
