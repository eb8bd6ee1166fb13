use nalgebra::{Matrix3, Vector2, Vector3};

use super::camera::CameraIntrinsics;
use super::se3::{Pose, RelativePose};
use super::triangulate::triangulate;
use super::GeometryError;

/// Symmetric-epipolar-distance threshold on intrinsics-normalized
/// coordinates under which a match counts as correct.
pub const EPIPOLAR_INLIER_THRESHOLD: f64 = 5e-4;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Essential matrix of a relative pose: `E = [t]ₓ R`.
pub fn essential_from_pose(rel: &Pose) -> Matrix3<f64> {
    skew(&rel.t) * rel.r
}

/// Projects a 3×3 matrix onto the essential manifold: singular values become
/// `(σ, σ, 0)` with σ the mean of the two largest.
pub fn project_to_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * v_t
}

/// `E = K'ᵀ F K`, projected onto the essential manifold.
pub fn essential_from_fundamental(
    f: &Matrix3<f64>,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Matrix3<f64> {
    let e = k_b.k_matrix().transpose() * f * k_a.k_matrix();
    project_to_essential(&e)
}

/// The standard four-fold decomposition `{R₁,R₂}×{±t}` of an essential
/// matrix, each candidate with unit translation.
pub fn decompose_essential(e: &Matrix3<f64>) -> [RelativePose; 4] {
    let e = project_to_essential(e);
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).normalize();
    [
        RelativePose::up_to_scale(Pose::new(r1, t)),
        RelativePose::up_to_scale(Pose::new(r1, -t)),
        RelativePose::up_to_scale(Pose::new(r2, t)),
        RelativePose::up_to_scale(Pose::new(r2, -t)),
    ]
}

/// Symmetric epipolar distance of a correspondence under `F` (or `E` when
/// the coordinates are intrinsics-normalized): the squared epipolar residual
/// scaled by both line normalizations.
pub fn symmetric_epipolar_distance(
    f: &Matrix3<f64>,
    x_a: &Vector2<f64>,
    x_b: &Vector2<f64>,
) -> f64 {
    let pa = Vector3::new(x_a.x, x_a.y, 1.0);
    let pb = Vector3::new(x_b.x, x_b.y, 1.0);
    let fa = f * pa;
    let ftb = f.transpose() * pb;
    let r = pb.dot(&fa);
    r * r * (1.0 / (fa.x * fa.x + fa.y * fa.y) + 1.0 / (ftb.x * ftb.x + ftb.y * ftb.y))
}

/// Picks the candidate with the most matches triangulating in front of both
/// cameras; ties break toward the smallest index. Returns the index and pose.
pub fn select_cheirality(
    candidates: &[RelativePose],
    matches: &[(Vector2<f64>, Vector2<f64>)],
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<(usize, RelativePose), GeometryError> {
    if matches.is_empty() {
        return Err(GeometryError::NoValidSolution);
    }
    let mut best: Option<(usize, usize)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        let mut count = 0;
        for (xa, xb) in matches {
            let Ok(y) = triangulate(cand, xa, xb, k_a, k_b) else {
                continue;
            };
            let in_a = y.z > 0.0;
            let in_b = cand.pose.act(&y).z > 0.0;
            if in_a && in_b {
                count += 1;
            }
        }
        let better = match best {
            None => count > 0,
            Some((_, best_count)) => count > best_count,
        };
        if better {
            best = Some((idx, count));
        }
    }
    match best {
        Some((idx, _)) => Ok((idx, candidates[idx])),
        None => Err(GeometryError::NoValidSolution),
    }
}

/// Training-time selection: the candidate minimizing the pose error against
/// the ground truth (rotation plus translation angle).
pub fn select_closest_to_gt(
    candidates: &[RelativePose],
    gt: &RelativePose,
) -> (usize, RelativePose) {
    let mut best_idx = 0;
    let mut best_err = f64::INFINITY;
    for (idx, cand) in candidates.iter().enumerate() {
        let e = super::metrics::pose_error(cand, gt);
        let total = e.rot_deg + e.transl_deg.unwrap_or(180.0);
        if total < best_err {
            best_err = total;
            best_idx = idx;
        }
    }
    (best_idx, candidates[best_idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector6;

    fn sample_pose() -> Pose {
        Pose::exp(&Vector6::new(0.4, 0.05, -0.1, 0.1, -0.25, 0.2))
    }

    #[test]
    fn decompose_recovers_pose() {
        let p = sample_pose();
        let e = essential_from_pose(&p);
        let cands = decompose_essential(&e);
        assert_eq!(cands.len(), 4);
        let t_unit = p.t.normalize();
        let found = cands.iter().any(|c| {
            (c.pose.r - p.r).norm() < 1e-8 && (c.pose.t - t_unit).norm() < 1e-8
        });
        assert!(found, "ground-truth pose not among candidates");
    }

    #[test]
    fn pure_translation_candidates_include_identity_rotation() {
        let p = Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let e = essential_from_pose(&p);
        let cands = decompose_essential(&e);
        let found = cands.iter().any(|c| {
            (c.pose.r - Matrix3::identity()).norm() < 1e-8
                && (c.pose.t.x.abs() - 1.0).abs() < 1e-8
                && c.pose.t.y.abs() < 1e-8
                && c.pose.t.z.abs() < 1e-8
        });
        assert!(found);
    }

    #[test]
    fn symmetric_distance_is_symmetric_under_swap() {
        let p = sample_pose();
        let e = essential_from_pose(&p);
        let xa = Vector2::new(0.1, -0.2);
        let xb = Vector2::new(0.3, 0.05);
        let d1 = symmetric_epipolar_distance(&e, &xa, &xb);
        let d2 = symmetric_epipolar_distance(&e.transpose(), &xb, &xa);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn closest_to_gt_returns_exact_candidate() {
        let p = sample_pose();
        let e = essential_from_pose(&p);
        let cands = decompose_essential(&e);
        let gt = RelativePose::up_to_scale(p);
        let (_, sel) = select_closest_to_gt(&cands, &gt);
        assert!((sel.pose.r - gt.pose.r).norm() < 1e-8);
        assert!((sel.pose.t - gt.pose.t).norm() < 1e-8);
    }
}
