//! Match and pose loss terms, on the tape for training and as plain numbers
//! for validation metrics.

use super::MatchLabels;
use crate::autodiff::{DiffError, NodeId, Tape};
use crate::geometry::RelativePose;
use crate::posesolver::tensor_from_mat3;
use crate::posesolver::PoseNodes;

/// Assignment probabilities are floored here before the log.
pub const LOG_FLOOR: f64 = 1e-12;
/// Margin for arccos clamping in the pose loss.
pub const ACOS_MARGIN: f64 = 1e-7;

pub struct MatchLossTerms {
    pub loss: NodeId,
    /// Number of labeled events clipped at the probability floor.
    pub saturated: usize,
    /// Number of labeled events contributing to the loss.
    pub terms: usize,
}

/// Negative log-likelihood of the labeled assignment: matched pairs at their
/// interior entries, unmatched keypoints at their dustbin entries.
pub fn match_loss(
    tape: &mut Tape,
    log_p: NodeId,
    labels: &MatchLabels,
) -> Result<MatchLossTerms, DiffError> {
    let (rows, cols) = {
        let t = tape.value(log_p);
        (t.rows(), t.cols())
    };
    let (bin_row, bin_col) = (rows - 1, cols - 1);
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in &labels.matches {
        entries.push((i, j));
    }
    for &i in &labels.unmatched_a {
        entries.push((i, bin_col));
    }
    for &j in &labels.unmatched_b {
        entries.push((bin_row, j));
    }
    if entries.is_empty() {
        let zero = tape.scalar(0.0);
        return Ok(MatchLossTerms {
            loss: zero,
            saturated: 0,
            terms: 0,
        });
    }
    let picked = tape.gather_entries(log_p, &entries)?;
    let floor = LOG_FLOOR.ln();
    let saturated = tape
        .value(picked)
        .data()
        .iter()
        .filter(|&&x| x < floor)
        .count();
    let clamped = tape.clamp_min(picked, floor);
    let total = tape.sum_all(clamped);
    Ok(MatchLossTerms {
        loss: tape.neg(total),
        saturated,
        terms: entries.len(),
    })
}

/// Pose loss on the tape: translation-direction angle plus λ_rot times the
/// rotation geodesic angle, in radians, against a fixed ground truth.
pub fn pose_loss_tape(
    tape: &mut Tape,
    estimate: PoseNodes,
    gt: &RelativePose,
    lambda_rot: f64,
) -> Result<NodeId, DiffError> {
    // Translation angle: arccos(t̂·t / (‖t̂‖·‖t‖)).
    let t_gt = gt.pose.t.normalize();
    let t_gt_node = tape.constant(crate::autodiff::Tensor::vector(vec![
        t_gt.x, t_gt.y, t_gt.z,
    ]));
    let dot = tape.dot(estimate.t, t_gt_node)?;
    let norm = tape.norm2(estimate.t)?;
    let inv_norm = tape.recip(norm)?;
    let cos_t = tape.mul(dot, inv_norm)?;
    let transl_term = tape.acos_clamped(cos_t, ACOS_MARGIN);

    // Rotation angle: arccos((tr(R̂ᵀR) − 1)/2).
    let r_gt_node = tape.constant(tensor_from_mat3(&gt.pose.r));
    let rt = tape.transpose(estimate.r)?;
    let rel = tape.matmul(rt, r_gt_node)?;
    let diag = tape.diag_part(rel)?;
    let trace = tape.sum_all(diag);
    let shifted = tape.add_const(trace, -1.0);
    let cos_r = tape.scale(shifted, 0.5);
    let rot_term = tape.acos_clamped(cos_r, ACOS_MARGIN);

    let rot_scaled = tape.scale(rot_term, lambda_rot);
    tape.add(transl_term, rot_scaled)
}

/// Plain evaluation of the pose loss for validation metrics (radians).
pub fn pose_loss_plain(estimate: &RelativePose, gt: &RelativePose, lambda_rot: f64) -> f64 {
    let hi = 1.0 - ACOS_MARGIN;
    let lo = -1.0 + ACOS_MARGIN;
    let ne = estimate.pose.t.norm();
    let ng = gt.pose.t.norm();
    let cos_t = (estimate.pose.t.dot(&gt.pose.t) / (ne * ng)).clamp(lo, hi);
    let rel = estimate.pose.r.transpose() * gt.pose.r;
    let cos_r = ((rel.trace() - 1.0) / 2.0).clamp(lo, hi);
    cos_t.acos() + lambda_rot * cos_r.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::geometry::Pose;
    use nalgebra::{Vector3, Vector6};

    #[test]
    fn perfect_assignment_has_zero_loss() {
        let mut tape = Tape::new();
        // log P = 0 at every labeled event means probability 1.
        let mut log_p = Tensor::filled(vec![3, 3], -30.0);
        log_p.set(0, 0, 0.0);
        log_p.set(1, 2, 0.0);
        log_p.set(2, 1, 0.0);
        let lp = tape.constant(log_p);
        let labels = MatchLabels {
            matches: vec![(0, 0)],
            unmatched_a: vec![1],
            unmatched_b: vec![1],
        };
        let out = match_loss(&mut tape, lp, &labels).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
        assert_eq!(out.saturated, 0);
        assert_eq!(out.terms, 3);
    }

    #[test]
    fn single_half_probability_match_costs_ln_two() {
        let mut tape = Tape::new();
        let mut log_p = Tensor::filled(vec![2, 2], -5.0);
        log_p.set(0, 0, 0.5f64.ln());
        let lp = tape.constant(log_p);
        let labels = MatchLabels {
            matches: vec![(0, 0)],
            unmatched_a: vec![],
            unmatched_b: vec![],
        };
        let out = match_loss(&mut tape, lp, &labels).unwrap();
        assert!((tape.value(out.loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_equals_per_term_summation_oracle() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..20).map(|i| -0.1 * (i as f64 + 1.0)).collect();
        let log_p = Tensor::matrix(4, 5, data.clone());
        let lp = tape.constant(log_p);
        let labels = MatchLabels {
            matches: vec![(0, 1), (2, 0)],
            unmatched_a: vec![1],
            unmatched_b: vec![2, 3],
        };
        let out = match_loss(&mut tape, lp, &labels).unwrap();
        // Independent accumulation.
        let at = |i: usize, j: usize| data[i * 5 + j];
        let expected = -(at(0, 1) + at(2, 0) + at(1, 4) + at(3, 2) + at(3, 3));
        assert!((tape.value(out.loss).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn probability_floor_counts_saturation() {
        let mut tape = Tape::new();
        let mut log_p = Tensor::filled(vec![2, 2], -40.0);
        log_p.set(0, 0, -40.0);
        let lp = tape.constant(log_p);
        let labels = MatchLabels {
            matches: vec![(0, 0)],
            unmatched_a: vec![],
            unmatched_b: vec![],
        };
        let out = match_loss(&mut tape, lp, &labels).unwrap();
        assert_eq!(out.saturated, 1);
        assert!((tape.value(out.loss).item() + LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_zero_at_ground_truth_and_orthogonal_translations() {
        let gt = RelativePose::up_to_scale(Pose::exp(&Vector6::new(
            0.6, 0.2, -0.1, 0.1, -0.2, 0.3,
        )));
        // The 1e-7 arccos clamp leaves a floor of ~4.5e-4 rad per term.
        assert!(pose_loss_plain(&gt, &gt, 3.0) < 5e-3);
        let mut ortho = gt;
        // Rotate the translation 90° about an axis orthogonal to it.
        let t = gt.pose.t;
        let axis = t.cross(&Vector3::new(0.0, 0.0, 1.0)).normalize();
        let rot =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::FRAC_PI_2);
        ortho.pose.t = rot * t;
        let loss = pose_loss_plain(&ortho, &gt, 1.0);
        assert!((loss - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
    }
}
