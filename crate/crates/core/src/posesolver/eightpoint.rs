//! Confidence-weighted eight-point solve on the tape, and pose recovery via
//! essential decomposition with cheirality or closest-to-ground-truth
//! selection.

use nalgebra::Vector2;

use super::normalize::normalize_points_weighted_tape;
use super::tapegeom::{mat3_from_tensor, tensor_from_mat3, vec3_from_tensor};
use super::{MatchNodes, SolverError};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::{
    select_cheirality, select_closest_to_gt, CameraIntrinsics, Pose, RelativePose,
};

/// Tape handles of a recovered pose.
#[derive(Clone, Copy, Debug)]
pub struct PoseNodes {
    pub r: NodeId,
    pub t: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub enum RecoveryMode<'a> {
    /// Test time: most triangulated points in front of both cameras.
    Cheirality,
    /// Training time: candidate closest to the ground truth.
    ClosestToGt(&'a RelativePose),
}

/// Solves `diag(w) A flat(F) = 0` in the least-squares sense on
/// Hartley-normalized coordinates, enforces rank 2, denormalizes and scales
/// to unit Frobenius norm. Fully differentiable in coordinates and weights.
pub fn weighted_eight_point(tape: &mut Tape, m: &MatchNodes) -> Result<NodeId, SolverError> {
    let n = m.len(tape);
    if n < 8 {
        return Err(SolverError::TooFewMatches { got: n, need: 8 });
    }
    let positive = tape.value(m.w).data().iter().filter(|&&w| w > 0.0).count();
    if positive < 8 {
        return Err(SolverError::TooFewPositiveWeights {
            got: positive,
            need: 8,
        });
    }

    // Canonical row order makes the solve independent of input permutation.
    let order = super::canonical_match_order(tape, m);
    let m = super::gather_match_nodes(tape, m, &order)?;
    let m = &m;

    let (na, t_a) = normalize_points_weighted_tape(tape, m.x_a, m.w)?;
    let (nb, t_b) = normalize_points_weighted_tape(tape, m.x_b, m.w)?;

    // Rows of A: [x x', x y', x, y x', y y', y, x', y', 1] for flat(F) in
    // column-major order.
    let x = tape.slice_cols(na, 0, 1)?;
    let y = tape.slice_cols(na, 1, 2)?;
    let xp = tape.slice_cols(nb, 0, 1)?;
    let yp = tape.slice_cols(nb, 1, 2)?;
    let xxp = tape.mul(x, xp)?;
    let xyp = tape.mul(x, yp)?;
    let yxp = tape.mul(y, xp)?;
    let yyp = tape.mul(y, yp)?;
    let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0));
    let a = tape.concat_cols(&[xxp, xyp, x, yxp, yyp, y, xp, yp, ones])?;
    let wa = tape.scale_rows(a, m.w)?;

    let v = tape.svd_min_right(wa)?;
    // v is flat(F) column-major; a row-major reshape gives Fᵀ.
    let ft = tape.reshape(v, vec![3, 3])?;
    let f_hat = tape.transpose(ft)?;

    // Rank-2 projection via the packed SVD.
    let packed = tape.svd3(f_hat)?;
    let u = tape.slice_cols(packed, 0, 3)?;
    let sigma = tape.slice_cols(packed, 3, 4)?;
    let sigma = tape.reshape(sigma, vec![3])?;
    let vmat = tape.slice_cols(packed, 4, 7)?;
    let s1 = tape.slice_vec(sigma, 0, 1)?;
    let s2 = tape.slice_vec(sigma, 1, 2)?;
    let s1m = tape.reshape(s1, vec![1, 1])?;
    let s2m = tape.reshape(s2, vec![1, 1])?;
    let diag = tape.assemble(3, 3, &[(s1m, 0, 0), (s2m, 1, 1)])?;
    let ud = tape.matmul(u, diag)?;
    let vt = tape.transpose(vmat)?;
    let f_rank2 = tape.matmul(ud, vt)?;

    // Denormalize: F = T'ᵀ F̂ T, then fix the scale.
    let t_b_t = tape.transpose(t_b)?;
    let tf = tape.matmul(t_b_t, f_rank2)?;
    let f_px = tape.matmul(tf, t_a)?;
    let norm = tape.norm2(f_px)?;
    let inv = tape.recip(norm)?;
    Ok(tape.scale_t(f_px, inv)?)
}

/// Recovers the relative pose from a fundamental-matrix node: essential
/// projection, four-fold decomposition, then candidate selection. The
/// selection itself is treated as non-differentiable branching; gradients
/// flow through the selected candidate's tape path only.
pub fn recover_pose(
    tape: &mut Tape,
    f: NodeId,
    matches_px: &[(Vector2<f64>, Vector2<f64>)],
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    mode: RecoveryMode,
) -> Result<(RelativePose, PoseNodes, usize), SolverError> {
    let ka_n = tape.constant(tensor_from_mat3(&k_a.k_matrix()));
    let kb_t = tape.constant(tensor_from_mat3(&k_b.k_matrix().transpose()));
    let ef = tape.matmul(kb_t, f)?;
    let e_raw = tape.matmul(ef, ka_n)?;
    let norm = tape.norm2(e_raw)?;
    let inv = tape.recip(norm)?;
    let e = tape.scale_t(e_raw, inv)?;

    let packed = tape.svd3(e)?;
    let mut u = tape.slice_cols(packed, 0, 3)?;
    let mut v = tape.slice_cols(packed, 4, 7)?;
    // Make both factors proper rotations; constant sign flips are invisible
    // to the essential matrix up to its σ₃ ≈ 0 component.
    let flip = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
    if mat3_from_tensor(tape.value(u)).determinant() < 0.0 {
        let fl = tape.constant(flip.clone());
        u = tape.matmul(u, fl)?;
    }
    if mat3_from_tensor(tape.value(v)).determinant() < 0.0 {
        let fl = tape.constant(flip);
        v = tape.matmul(v, fl)?;
    }
    let w = tape.constant(Tensor::matrix(
        3,
        3,
        vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let wt = tape.transpose(w)?;
    let vt = tape.transpose(v)?;
    let uw = tape.matmul(u, w)?;
    let r1 = tape.matmul(uw, vt)?;
    let uwt = tape.matmul(u, wt)?;
    let r2 = tape.matmul(uwt, vt)?;
    let t_col = tape.slice_cols(u, 2, 3)?;
    let t_pos = tape.reshape(t_col, vec![3])?;
    let t_neg = tape.neg(t_pos);

    let cand_nodes = [
        PoseNodes { r: r1, t: t_pos },
        PoseNodes { r: r1, t: t_neg },
        PoseNodes { r: r2, t: t_pos },
        PoseNodes { r: r2, t: t_neg },
    ];
    let candidates: Vec<RelativePose> = cand_nodes
        .iter()
        .map(|pn| {
            RelativePose::up_to_scale(Pose::new(
                mat3_from_tensor(tape.value(pn.r)),
                vec3_from_tensor(tape.value(pn.t)),
            ))
        })
        .collect();

    let idx = match mode {
        RecoveryMode::Cheirality => select_cheirality(&candidates, matches_px, k_a, k_b)?.0,
        RecoveryMode::ClosestToGt(gt) => select_closest_to_gt(&candidates, gt).0,
    };
    Ok((candidates[idx], cand_nodes[idx], idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_at;
    use crate::geometry::{essential_from_pose, symmetric_epipolar_distance};
    use crate::posesolver::WeightedMatches;
    use nalgebra::{Vector3, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(480.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    pub fn synthetic_matches(
        rng: &mut ChaCha8Rng,
        rel: &Pose,
        k: &CameraIntrinsics,
        n: usize,
        noise_px: f64,
    ) -> WeightedMatches {
        let mut out = WeightedMatches::default();
        while out.len() < n {
            let y = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.1..1.1),
                rng.random_range(2.5..6.0),
            );
            let (Ok(xa), Ok(xb)) = (k.project(&y), {
                let yb = rel.act(&y);
                if yb.z <= 0.1 {
                    continue;
                }
                k.project(&yb)
            }) else {
                continue;
            };
            if !k.contains(&xa) || !k.contains(&xb) {
                continue;
            }
            let na = Vector2::new(
                xa.x + noise_px * normal(rng),
                xa.y + noise_px * normal(rng),
            );
            let nb = Vector2::new(
                xb.x + noise_px * normal(rng),
                xb.y + noise_px * normal(rng),
            );
            out.push(na, nb, 1.0);
        }
        out
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn test_pose() -> Pose {
        let mut p = Pose::exp(&Vector6::new(1.0, 0.15, 0.2, 0.05, -0.35, 0.1));
        p.t = p.t.normalize();
        p
    }

    #[test]
    fn noise_free_f_satisfies_epipolar_constraint() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let matches = synthetic_matches(&mut rng, &rel, &k, 20, 0.0);
        let mut tape = Tape::new();
        let nodes = MatchNodes::from_weighted(&mut tape, &matches, false, false);
        let f = weighted_eight_point(&mut tape, &nodes).unwrap();
        let fm = mat3_from_tensor(tape.value(f));
        let mut max_d: f64 = 0.0;
        for i in 0..matches.len() {
            max_d = max_d.max(symmetric_epipolar_distance(
                &fm,
                &matches.x_a[i],
                &matches.x_b[i],
            ));
        }
        assert!(max_d < 1e-9, "max symmetric epipolar distance {max_d}");
    }

    #[test]
    fn uniform_weight_scaling_leaves_f_unchanged() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut matches = synthetic_matches(&mut rng, &rel, &k, 15, 0.5);
        let run = |m: &WeightedMatches| -> Tensor {
            let mut tape = Tape::new();
            let nodes = MatchNodes::from_weighted(&mut tape, m, false, false);
            let f = weighted_eight_point(&mut tape, &nodes).unwrap();
            tape.value(f).clone()
        };
        let f1 = run(&matches);
        matches.w.iter_mut().for_each(|w| *w = 0.7);
        let f07 = run(&matches);
        let diff_plus: f64 = f1
            .data()
            .iter()
            .zip(f07.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let diff_minus: f64 = f1
            .data()
            .iter()
            .zip(f07.data())
            .map(|(a, b)| (a + b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff_plus.min(diff_minus) < 1e-10);
    }

    #[test]
    fn zero_weight_outliers_drop_out() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inliers = synthetic_matches(&mut rng, &rel, &k, 16, 0.2);
        // Corrupt copies with gross outliers at zero weight.
        let mut with_outliers = inliers.clone();
        for i in 0..6 {
            with_outliers.push(
                Vector2::new(10.0 + i as f64 * 50.0, 400.0),
                Vector2::new(600.0 - i as f64 * 30.0, 20.0),
                0.0,
            );
        }
        let run = |m: &WeightedMatches| -> Tensor {
            let mut tape = Tape::new();
            let nodes = MatchNodes::from_weighted(&mut tape, m, false, false);
            let f = weighted_eight_point(&mut tape, &nodes).unwrap();
            tape.value(f).clone()
        };
        let f_in = run(&inliers);
        let f_out = run(&with_outliers);
        let d_plus: f64 = f_in
            .data()
            .iter()
            .zip(f_out.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let d_minus: f64 = f_in
            .data()
            .iter()
            .zip(f_out.data())
            .map(|(a, b)| (a + b).powi(2))
            .sum::<f64>()
            .sqrt();
        // Hartley normalization sees the outlier coordinates, so the solves
        // differ in the last bits; the zero rows themselves drop out of the
        // linear system exactly.
        assert!(d_plus.min(d_minus) < 1e-9, "difference {}", d_plus.min(d_minus));
    }

    #[test]
    fn noise_free_recovery_is_exact() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let matches = synthetic_matches(&mut rng, &rel, &k, 20, 0.0);
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = matches
            .x_a
            .iter()
            .zip(matches.x_b.iter())
            .map(|(a, b)| (*a, *b))
            .collect();
        let mut tape = Tape::new();
        let nodes = MatchNodes::from_weighted(&mut tape, &matches, false, false);
        let f = weighted_eight_point(&mut tape, &nodes).unwrap();
        let (pose, _, _) =
            recover_pose(&mut tape, f, &pairs, &k, &k, RecoveryMode::Cheirality).unwrap();
        let gt = RelativePose::up_to_scale(rel);
        let err = crate::geometry::pose_error(&pose, &gt);
        assert!(err.rot_deg < 1e-4, "rotation error {}", err.rot_deg);
        assert!(
            err.transl_deg.unwrap() < 1e-4,
            "translation error {:?}",
            err.transl_deg
        );
        // Cheirality agrees with closest-to-gt on all-in-front scenes.
        let (pose2, _, _) = recover_pose(
            &mut tape,
            f,
            &pairs,
            &k,
            &k,
            RecoveryMode::ClosestToGt(&gt),
        )
        .unwrap();
        assert!((pose2.pose.r - pose.pose.r).norm() < 1e-12);
    }

    #[test]
    fn gradient_wrt_weights_matches_central_differences() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Noise keeps the spectrum separated for the SVD derivative.
        let matches = synthetic_matches(&mut rng, &rel, &k, 12, 1.0);
        let w0 = Tensor::vector(vec![0.9, 0.8, 0.7, 0.85, 0.6, 0.95, 0.75, 0.9, 0.8, 0.7, 0.85, 0.9]);
        let xa = matches.x_a.clone();
        let xb = matches.x_b.clone();
        let probe = Tensor::new(vec![3, 3], (0..9).map(|i| 0.1 * (i as f64 + 1.0)).collect());
        let coords: Vec<usize> = (0..12).collect();
        let err = gradcheck_at(
            move |tape, w| {
                let mut m = WeightedMatches::default();
                for i in 0..xa.len() {
                    m.push(xa[i], xb[i], 1.0);
                }
                let mut nodes = MatchNodes::from_weighted(tape, &m, false, false);
                nodes.w = w;
                let f = weighted_eight_point(tape, &nodes).map_err(solver_to_diff)?;
                let p = tape.constant(probe.clone());
                let fp = tape.mul(f, p)?;
                Ok(tape.sum_all(fp))
            },
            &w0,
            1e-6,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-3, "eight-point weight gradient error {err}");
    }

    #[test]
    fn gradient_wrt_coordinates_matches_central_differences() {
        let k = cam();
        let rel = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let matches = synthetic_matches(&mut rng, &rel, &k, 12, 1.0);
        let mut xa_flat = Vec::new();
        for p in &matches.x_a {
            xa_flat.push(p.x);
            xa_flat.push(p.y);
        }
        let xa0 = Tensor::matrix(12, 2, xa_flat);
        let xb = matches.x_b.clone();
        let w = matches.w.clone();
        let probe = Tensor::new(vec![3, 3], (0..9).map(|i| 0.1 * (i as f64 + 1.0)).collect());
        let coords: Vec<usize> = (0..24).step_by(3).collect();
        let err = gradcheck_at(
            move |tape, xa| {
                let mut m = WeightedMatches::default();
                for i in 0..xb.len() {
                    m.push(Vector2::zeros(), xb[i], w[i]);
                }
                let mut nodes = MatchNodes::from_weighted(tape, &m, false, false);
                nodes.x_a = xa;
                let f = weighted_eight_point(tape, &nodes).map_err(solver_to_diff)?;
                let p = tape.constant(probe.clone());
                let fp = tape.mul(f, p)?;
                Ok(tape.sum_all(fp))
            },
            &xa0,
            1e-6,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-3, "eight-point coordinate gradient error {err}");
    }

    fn solver_to_diff(e: SolverError) -> crate::autodiff::DiffError {
        match e {
            SolverError::Diff(d) => d,
            other => panic!("unexpected solver error: {other}"),
        }
    }
}
