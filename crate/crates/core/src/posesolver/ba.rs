//! Unrolled Gauss-Newton bundle adjustment over the relative pose and the
//! triangulated 3D points, recorded on the tape end to end.

use nalgebra::{Vector2, Vector3};

use super::tapegeom::{
    mat3_from_tensor, projection_jacobian_tape, project_tape, se3_exp_tape, tensor_from_mat3,
    tensor_from_vec3, transform_tape, triangulate_tape, vec3_from_tensor,
};
use super::{MatchNodes, SolverError};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::{CameraIntrinsics, Landmark, Pose, RelativePose};

/// Gauss-Newton schedule: T iterations, initial damping β₀, division by 3.5
/// on residual decrease and multiplication by 1.5 on increase.
#[derive(Clone, Copy, Debug)]
pub struct BaConfig {
    pub iterations: usize,
    pub beta0: f64,
}

impl BaConfig {
    pub fn test_time() -> Self {
        BaConfig {
            iterations: 10,
            beta0: 0.1,
        }
    }

    pub fn train_time() -> Self {
        BaConfig {
            iterations: 5,
            beta0: 0.1,
        }
    }
}

/// Refined pose with tape handles and convergence diagnostics.
pub struct BaResult {
    pub pose: RelativePose,
    pub r_node: NodeId,
    pub t_node: NodeId,
    pub landmarks: Vec<Landmark>,
    /// Matches dropped at initialization (behind a camera, degenerate rays
    /// or zero weight).
    pub dropped: usize,
    /// Indices into the original match list that were kept.
    pub kept: Vec<usize>,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Unweighted reprojection RMSE in pixels.
    pub initial_rmse: f64,
    pub final_rmse: f64,
}

/// Confidence-weighted reprojection residuals in the interleaved order
/// `[r_1 ‖ r'_1 ‖ … ‖ r_M ‖ r'_M]`, computed without the tape. Serves as the
/// independent oracle for the tape-side system builder.
pub fn ba_residuals_plain(
    pose: &Pose,
    landmarks: &[Vector3<f64>],
    x_a: &[Vector2<f64>],
    x_b: &[Vector2<f64>],
    w: &[f64],
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<Vec<f64>, SolverError> {
    let mut r = Vec::with_capacity(4 * landmarks.len());
    for m in 0..landmarks.len() {
        let pa = k_a.project(&landmarks[m])?;
        let pb = k_b.project(&pose.act(&landmarks[m]))?;
        r.push(w[m] * (pa.x - x_a[m].x));
        r.push(w[m] * (pa.y - x_a[m].y));
        r.push(w[m] * (pb.x - x_b[m].x));
        r.push(w[m] * (pb.y - x_b[m].y));
    }
    Ok(r)
}

/// Builds the `[4M]` residual vector on the tape for the current state.
pub fn ba_residuals_tape(
    tape: &mut Tape,
    r_cur: NodeId,
    t_cur: NodeId,
    ys: &[NodeId],
    m: &MatchNodes,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<NodeId, SolverError> {
    let mut parts = Vec::with_capacity(2 * ys.len());
    for (idx, &y) in ys.iter().enumerate() {
        let w_m = tape.slice_vec(m.w, idx, idx + 1)?;
        let xa_row = tape.slice_rows(m.x_a, idx, idx + 1)?;
        let xa = tape.reshape(xa_row, vec![2])?;
        let xb_row = tape.slice_rows(m.x_b, idx, idx + 1)?;
        let xb = tape.reshape(xb_row, vec![2])?;
        let pa = project_tape(tape, y, k_a)?;
        let u_b = transform_tape(tape, r_cur, t_cur, y)?;
        let pb = project_tape(tape, u_b, k_b)?;
        let da = tape.sub(pa, xa)?;
        let ra = tape.scale_t(da, w_m)?;
        let db = tape.sub(pb, xb)?;
        let rb = tape.scale_t(db, w_m)?;
        parts.push(ra);
        parts.push(rb);
    }
    Ok(tape.concat_vecs(&parts)?)
}

/// Assembles the `4M×(6+3M)` Jacobian on the tape. Pose columns use the
/// left-multiplicative se(3) increment (translation then rotation); the
/// first camera is fixed, so `∂r_m/∂p = 0`.
pub fn ba_jacobian_tape(
    tape: &mut Tape,
    r_cur: NodeId,
    t_cur: NodeId,
    ys: &[NodeId],
    m: &MatchNodes,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<NodeId, SolverError> {
    let n = ys.len();
    let mut blocks = Vec::with_capacity(3 * n);
    let eye3 = tape.constant(Tensor::identity(3));
    for (idx, &y) in ys.iter().enumerate() {
        let w_m = tape.slice_vec(m.w, idx, idx + 1)?;
        let u_b = transform_tape(tape, r_cur, t_cur, y)?;
        let ja = projection_jacobian_tape(tape, y, k_a)?;
        let jb = projection_jacobian_tape(tape, u_b, k_b)?;
        // ∂r_m/∂y = w · ∂π/∂y.
        let dr_dy = tape.scale_t(ja, w_m)?;
        // ∂r'_m/∂p = w · ∂π'/∂u · [I | -(Ry+t)^].
        let sk = tape.skew3(u_b)?;
        let neg_sk = tape.neg(sk);
        let pose_block = tape.concat_cols(&[eye3, neg_sk])?;
        let jp = tape.matmul(jb, pose_block)?;
        let drp_dp = tape.scale_t(jp, w_m)?;
        // ∂r'_m/∂y = w · ∂π'/∂u · R.
        let jr = tape.matmul(jb, r_cur)?;
        let drp_dy = tape.scale_t(jr, w_m)?;

        let row = 4 * idx;
        let col = 6 + 3 * idx;
        blocks.push((dr_dy, row, col));
        blocks.push((drp_dp, row + 2, 0));
        blocks.push((drp_dy, row + 2, col));
    }
    Ok(tape.assemble(4 * n, 6 + 3 * n, &blocks)?)
}

fn unweighted_rmse(
    pose: &Pose,
    landmarks: &[Vector3<f64>],
    x_a: &[Vector2<f64>],
    x_b: &[Vector2<f64>],
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for m in 0..landmarks.len() {
        let (Ok(pa), Ok(pb)) = (
            k_a.project(&landmarks[m]),
            k_b.project(&pose.act(&landmarks[m])),
        ) else {
            continue;
        };
        sum += (pa - x_a[m]).norm_squared() + (pb - x_b[m]).norm_squared();
        count += 4.0;
    }
    if count == 0.0 {
        f64::INFINITY
    } else {
        (sum / count).sqrt()
    }
}

/// Runs T unrolled Gauss-Newton iterations from an initial relative pose.
/// The whole computation stays on the tape, so the returned pose nodes are
/// differentiable with respect to the match coordinates and weights.
///
/// Matches that triangulate behind a camera at initialization, hit
/// degenerate rays, or carry (near-)zero weight are excluded from the state
/// with a diagnostic count.
pub fn bundle_adjust(
    tape: &mut Tape,
    init: &RelativePose,
    m: &MatchNodes,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    cfg: &BaConfig,
) -> Result<BaResult, SolverError> {
    let total = m.len(tape);
    let mut r_cur = tape.constant(tensor_from_mat3(&init.pose.r));
    let mut t_cur = tape.constant(tensor_from_vec3(&init.pose.t));

    // Triangulate in canonical match order (summation order is then fixed
    // regardless of the caller's ordering), dropping unusable matches.
    let canonical = super::canonical_match_order(tape, m);
    let mut ys: Vec<NodeId> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for idx in canonical {
        if tape.value(m.w).data()[idx] <= 1e-12 {
            continue;
        }
        let xa_row = tape.slice_rows(m.x_a, idx, idx + 1)?;
        let xa = tape.reshape(xa_row, vec![2])?;
        let xb_row = tape.slice_rows(m.x_b, idx, idx + 1)?;
        let xb = tape.reshape(xb_row, vec![2])?;
        let y = match triangulate_tape(tape, r_cur, t_cur, xa, xb, k_a, k_b) {
            Ok(y) => y,
            Err(_) => continue,
        };
        let depth_a = tape.value(y).data()[2];
        let yb = init.pose.act(&vec3_from_tensor(tape.value(y)));
        if depth_a <= 1e-6 || yb.z <= 1e-6 {
            continue;
        }
        ys.push(y);
        kept.push(idx);
    }
    let dropped = total - kept.len();
    if kept.is_empty() {
        return Err(SolverError::TooFewMatches { got: 0, need: 1 });
    }

    // The state indexes only the kept matches.
    let sub = gather_matches(tape, m, &kept)?;

    let mut beta = cfg.beta0;
    let mut prev_res_norm: Option<f64> = None;
    let mut initial_energy = 0.0;
    let initial_rmse = {
        let lms: Vec<Vector3<f64>> =
            ys.iter().map(|&y| vec3_from_tensor(tape.value(y))).collect();
        let (xa, xb, _) = plain_matches(tape, &sub);
        unweighted_rmse(&init.pose, &lms, &xa, &xb, k_a, k_b)
    };

    for it in 0..cfg.iterations {
        let r_vec = ba_residuals_tape(tape, r_cur, t_cur, &ys, &sub, k_a, k_b)?;
        let res_norm = tape.value(r_vec).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if !res_norm.is_finite() {
            return Err(SolverError::Divergence { iteration: it });
        }
        if it == 0 {
            initial_energy = res_norm * res_norm;
        }
        if let Some(prev) = prev_res_norm {
            if res_norm < prev {
                beta /= 3.5;
            } else {
                beta *= 1.5;
            }
        }
        prev_res_norm = Some(res_norm);

        let j = ba_jacobian_tape(tape, r_cur, t_cur, &ys, &sub, k_a, k_b)?;
        let jt = tape.transpose(j)?;
        let h = tape.matmul(jt, j)?;
        let r_col = tape.reshape(r_vec, vec![4 * ys.len(), 1])?;
        let g_col = tape.matmul(jt, r_col)?;
        let g = tape.reshape(g_col, vec![6 + 3 * ys.len()])?;
        // Multiplicative damping plus Jacobi preconditioning.
        let dvec = tape.diag_part(h)?;
        let dmat = tape.diag_mat(dvec)?;
        let damp = tape.scale(dmat, beta);
        let hd = tape.add(h, damp)?;
        let dd = tape.diag_part(hd)?;
        if tape.value(dd).data().iter().any(|&x| x <= 0.0) {
            return Err(SolverError::Degenerate(
                "non-positive damped diagonal in the normal equations".into(),
            ));
        }
        let sdd = tape.sqrt(dd)?;
        let sinv = tape.recip(sdd)?;
        let hs_rows = tape.scale_rows(hd, sinv)?;
        let hs = tape.scale_cols(hs_rows, sinv)?;
        let gneg = tape.neg(g);
        let rhs = tape.mul(gneg, sinv)?;
        let x_tilde = tape.linear_solve(hs, rhs)?;
        let dz = tape.mul(x_tilde, sinv)?;

        // State update: left-multiplicative pose composition, additive Y.
        let dp = tape.slice_vec(dz, 0, 6)?;
        let (r_exp, t_exp) = se3_exp_tape(tape, dp)?;
        let r_new = tape.matmul(r_exp, r_cur)?;
        let t_col = tape.reshape(t_cur, vec![3, 1])?;
        let rt = tape.matmul(r_exp, t_col)?;
        let rt_v = tape.reshape(rt, vec![3])?;
        let t_new = tape.add(rt_v, t_exp)?;
        r_cur = r_new;
        t_cur = t_new;
        for (mi, y) in ys.iter_mut().enumerate() {
            let dy = tape.slice_vec(dz, 6 + 3 * mi, 9 + 3 * mi)?;
            *y = tape.add(*y, dy)?;
        }
        if !tape.value(r_cur).all_finite() || !tape.value(t_cur).all_finite() {
            return Err(SolverError::Divergence { iteration: it });
        }
    }

    let final_pose = Pose::new(
        mat3_from_tensor(tape.value(r_cur)),
        vec3_from_tensor(tape.value(t_cur)),
    );
    let landmarks: Vec<Vector3<f64>> =
        ys.iter().map(|&y| vec3_from_tensor(tape.value(y))).collect();
    let (xa, xb, w) = plain_matches(tape, &sub);
    let final_rmse = unweighted_rmse(&final_pose, &landmarks, &xa, &xb, k_a, k_b);
    let final_energy = ba_residuals_plain(&final_pose, &landmarks, &xa, &xb, &w, k_a, k_b)
        .map(|r| r.iter().map(|x| x * x).sum())
        .unwrap_or(f64::INFINITY);

    Ok(BaResult {
        pose: RelativePose::up_to_scale(final_pose),
        r_node: r_cur,
        t_node: t_cur,
        landmarks,
        dropped,
        kept,
        initial_energy,
        final_energy,
        initial_rmse,
        final_rmse,
    })
}

fn gather_matches(
    tape: &mut Tape,
    m: &MatchNodes,
    kept: &[usize],
) -> Result<MatchNodes, SolverError> {
    Ok(super::gather_match_nodes(tape, m, kept)?)
}

fn plain_matches(
    tape: &Tape,
    m: &MatchNodes,
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>, Vec<f64>) {
    let ta = tape.value(m.x_a);
    let tb = tape.value(m.x_b);
    let n = ta.rows();
    let xa = (0..n).map(|i| Vector2::new(ta.get(i, 0), ta.get(i, 1))).collect();
    let xb = (0..n).map(|i| Vector2::new(tb.get(i, 0), tb.get(i, 1))).collect();
    (xa, xb, tape.value(m.w).data().to_vec())
}
