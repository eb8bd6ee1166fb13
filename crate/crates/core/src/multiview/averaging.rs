//! Robust rotation averaging (IRLS over chordal distance) and
//! direction-based translation averaging.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::graph::PoseGraphEdge;
use super::MultiviewError;
use crate::geometry::Pose;

const MAX_SWEEPS: usize = 100;
const CONVERGENCE_TOL: f64 = 1e-9;
/// IRLS scale for the Cauchy factor, radians (~5 degrees).
const IRLS_SIGMA: f64 = 0.0873;

fn project_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let det = (u * v_t).determinant();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * v_t
}

/// Result with a non-convergence warning rather than a hard failure.
pub struct RotationAveraging {
    pub rotations: Vec<Matrix3<f64>>,
    pub converged: bool,
    pub final_change: f64,
}

/// Iteratively reweighted chordal L2 averaging with the frame-0 gauge fixed.
/// Edge weights are inlier counts times a Cauchy factor of the current
/// residual angle.
pub fn rotation_averaging(
    n_frames: usize,
    edges: &[PoseGraphEdge],
    init: &[Pose],
) -> RotationAveraging {
    let mut rot: Vec<Matrix3<f64>> = init.iter().map(|p| p.r).collect();
    let gauge = rot[0];
    // Work in the frame-0 gauge: R_n ← R_n R_0ᵀ.
    for r in rot.iter_mut() {
        *r = *r * gauge.transpose();
    }
    let mut change = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        // IRLS weights from current residuals.
        let weights: Vec<f64> = edges
            .iter()
            .map(|e| {
                let residual = e.pose.pose.r * rot[e.a];
                let angle = {
                    let c = ((residual * rot[e.b].transpose()).trace() - 1.0) / 2.0;
                    c.clamp(-1.0, 1.0).acos()
                };
                // Geman-McClure-style factor: decays fast enough that a
                // grossly wrong edge is effectively rejected.
                let robust = (1.0 / (1.0 + (angle / IRLS_SIGMA).powi(2))).powi(2);
                (e.inliers.max(1) as f64) * robust
            })
            .collect();
        change = 0.0;
        for n in 1..n_frames {
            let mut acc = Matrix3::zeros();
            let mut any = false;
            for (e, &w) in edges.iter().zip(weights.iter()) {
                if e.b == n {
                    acc += (e.pose.pose.r * rot[e.a]) * w;
                    any = true;
                } else if e.a == n {
                    acc += (e.pose.pose.r.transpose() * rot[e.b]) * w;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let new_r = project_so3(&acc);
            let delta = {
                let c = ((new_r * rot[n].transpose()).trace() - 1.0) / 2.0;
                c.clamp(-1.0, 1.0).acos()
            };
            change = change.max(delta);
            rot[n] = new_r;
        }
        if change < CONVERGENCE_TOL {
            break;
        }
    }
    RotationAveraging {
        rotations: rot,
        converged: change < CONVERGENCE_TOL,
        final_change: change,
    }
}

/// Camera positions (up to global scale) from relative translation
/// directions: weighted least squares on `[u]ₓ (c_b − c_a) = 0` with the
/// gauge `c_0 = 0`, `Σ‖c‖ = 1`, sign fixed by the measured directions.
pub fn translation_averaging(
    n_frames: usize,
    edges: &[PoseGraphEdge],
    rotations: &[Matrix3<f64>],
) -> Result<Vec<Vector3<f64>>, MultiviewError> {
    if n_frames < 2 {
        return Ok(vec![Vector3::zeros(); n_frames]);
    }
    let unknowns = 3 * (n_frames - 1);
    let mut rows: Vec<[f64; 3]> = Vec::new(); // encoded per edge below
    let mut system = DMatrix::<f64>::zeros(3 * edges.len(), unknowns);
    for (ei, e) in edges.iter().enumerate() {
        // World direction from camera a toward camera b.
        let u: Vector3<f64> = -(rotations[e.b].transpose() * e.pose.pose.t);
        let u = u.normalize();
        rows.push([u.x, u.y, u.z]);
        let w = (e.inliers.max(1) as f64).sqrt();
        let skew = crate::geometry::skew(&u) * w;
        // Columns for c_b (positive) and c_a (negative); c_0 is fixed at 0.
        for r in 0..3 {
            for c in 0..3 {
                if e.b > 0 {
                    system[(3 * ei + r, 3 * (e.b - 1) + c)] += skew[(r, c)];
                }
                if e.a > 0 {
                    system[(3 * ei + r, 3 * (e.a - 1) + c)] -= skew[(r, c)];
                }
            }
        }
    }
    let svd = system.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    if unknowns >= 2 && sv[unknowns - 2] < 1e-8 * smax.max(1.0) {
        return Err(MultiviewError::Collinear);
    }
    let v_t = svd.v_t.unwrap();
    let sol = v_t.row(unknowns - 1).transpose();

    let mut centers = vec![Vector3::zeros(); n_frames];
    for n in 1..n_frames {
        centers[n] = Vector3::new(sol[3 * (n - 1)], sol[3 * (n - 1) + 1], sol[3 * (n - 1) + 2]);
    }
    // Disambiguate the global sign by the measured directions.
    let mut agreement = 0.0;
    for (e, u) in edges.iter().zip(rows.iter()) {
        let d = centers[e.b] - centers[e.a];
        agreement += d.dot(&Vector3::new(u[0], u[1], u[2])) * e.inliers.max(1) as f64;
    }
    if agreement < 0.0 {
        for c in centers.iter_mut() {
            *c = -*c;
        }
    }
    let norm: f64 = centers.iter().map(|c| c.norm()).sum();
    if norm > 0.0 {
        for c in centers.iter_mut() {
            *c /= norm;
        }
    }
    Ok(centers)
}

/// Absolute world-to-camera poses from averaged rotations and centers.
pub fn poses_from_rotations_and_centers(
    rotations: &[Matrix3<f64>],
    centers: &[Vector3<f64>],
) -> Vec<Pose> {
    rotations
        .iter()
        .zip(centers.iter())
        .map(|(r, c)| Pose::new(*r, -(r * c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RelativePose;
    use crate::posesolver::WeightedMatches;
    use nalgebra::Vector6;

    fn gt_poses(n: usize) -> Vec<Pose> {
        let raw: Vec<Pose> = (0..n)
            .map(|i| {
                Pose::exp(&Vector6::new(
                    0.8 * i as f64,
                    0.2 * ((i * 7) % 3) as f64,
                    -0.3 * ((i * 5) % 2) as f64,
                    0.06 * i as f64,
                    -0.04 * ((i + 1) % 3) as f64,
                    0.05 * i as f64,
                ))
            })
            .collect();
        let gauge = raw[0].inverse();
        raw.iter().map(|p| p.compose(&gauge)).collect()
    }

    fn exact_edges(gt: &[Pose], unit_t: bool) -> Vec<PoseGraphEdge> {
        let mut edges = Vec::new();
        for a in 0..gt.len() {
            for b in a + 1..gt.len() {
                let rel = gt[b].compose(&gt[a].inverse());
                let pose = if unit_t {
                    RelativePose::up_to_scale(rel)
                } else {
                    RelativePose::with_scale(rel)
                };
                edges.push(PoseGraphEdge {
                    a,
                    b,
                    pose,
                    inliers: 10,
                    matches: WeightedMatches::default(),
                    inlier_mask: Vec::new(),
                    indices: Vec::new(),
                });
            }
        }
        edges
    }

    #[test]
    fn consistent_inputs_are_a_fixed_point() {
        let gt = gt_poses(5);
        let edges = exact_edges(&gt, false);
        let out = rotation_averaging(5, &edges, &gt);
        assert!(out.converged);
        for (r, p) in out.rotations.iter().zip(gt.iter()) {
            assert!((r - p.r).norm() < 1e-10);
        }
    }

    #[test]
    fn one_corrupted_edge_is_outvoted() {
        let gt = gt_poses(5);
        let mut edges = exact_edges(&gt, false);
        // Corrupt one edge's rotation by ~40 degrees.
        edges[3].pose.pose.r =
            Pose::exp(&Vector6::new(0.0, 0.0, 0.0, 0.4, -0.3, 0.35)).r * edges[3].pose.pose.r;
        let out = rotation_averaging(5, &edges, &gt);
        for (r, p) in out.rotations.iter().zip(gt.iter()) {
            let c = (((r * p.r.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let deg = c.acos().to_degrees();
            assert!(deg < 0.1, "rotation error {deg} degrees");
        }
    }

    #[test]
    fn two_frames_return_the_relative_rotation() {
        let gt = gt_poses(2);
        let edges = exact_edges(&gt, false);
        let init = vec![Pose::identity(), Pose::identity()];
        let out = rotation_averaging(2, &edges, &init);
        assert!((out.rotations[1] - gt[1].r).norm() < 1e-10);
    }

    #[test]
    fn exact_directions_recover_centers_up_to_scale() {
        let gt = gt_poses(5);
        let edges = exact_edges(&gt, true);
        let rotations: Vec<Matrix3<f64>> = gt.iter().map(|p| p.r).collect();
        let centers = translation_averaging(5, &edges, &rotations).unwrap();
        let gt_centers: Vec<Vector3<f64>> = gt.iter().map(|p| p.center()).collect();
        let gt_norm: f64 = gt_centers.iter().map(|c| c.norm()).sum();
        for (got, want) in centers.iter().zip(gt_centers.iter()) {
            let want_scaled = want / gt_norm;
            let angle_err = (got - want_scaled).norm();
            assert!(angle_err < 1e-6, "center error {angle_err}");
        }
    }

    #[test]
    fn two_frames_give_unit_baseline_direction() {
        let gt = gt_poses(2);
        let edges = exact_edges(&gt, true);
        let rotations: Vec<Matrix3<f64>> = gt.iter().map(|p| p.r).collect();
        let centers = translation_averaging(2, &edges, &rotations).unwrap();
        assert!(centers[0].norm() < 1e-12);
        assert!((centers[1].norm() - 1.0).abs() < 1e-9);
        let dir_gt = gt[1].center().normalize();
        assert!((centers[1].normalize() - dir_gt).norm() < 1e-9);
    }

    #[test]
    fn collinear_cameras_error() {
        // Cameras along a line, exact directions: position along the line is
        // unobservable per camera.
        let mut gt = Vec::new();
        for i in 0..4 {
            gt.push(Pose::new(
                Matrix3::identity(),
                Vector3::new(-(i as f64), 0.0, 0.0),
            ));
        }
        let edges = exact_edges(&gt, true);
        let rotations: Vec<Matrix3<f64>> = gt.iter().map(|p| p.r).collect();
        assert!(matches!(
            translation_averaging(4, &edges, &rotations),
            Err(MultiviewError::Collinear)
        ));
    }
}
