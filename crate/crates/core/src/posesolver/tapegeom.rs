//! Geometry primitives recorded on the tape: SE(3) exponential, pinhole
//! projection with its Jacobian, midpoint triangulation.

use nalgebra::{Matrix3, Vector3};

use super::SolverError;
use crate::autodiff::{DiffError, NodeId, Tape, Tensor};
use crate::geometry::CameraIntrinsics;

const MIN_DEPTH: f64 = 1e-6;

pub fn tensor_from_mat3(m: &Matrix3<f64>) -> Tensor {
    // nalgebra stores column-major; the transpose's slice is row-major.
    Tensor::matrix(3, 3, m.transpose().as_slice().to_vec())
}

pub fn tensor_from_vec3(v: &Vector3<f64>) -> Tensor {
    Tensor::vector(vec![v.x, v.y, v.z])
}

pub fn mat3_from_tensor(t: &Tensor) -> Matrix3<f64> {
    Matrix3::from_row_slice(t.data())
}

pub fn vec3_from_tensor(t: &Tensor) -> Vector3<f64> {
    Vector3::new(t.data()[0], t.data()[1], t.data()[2])
}

/// se(3) exponential of a `[6]` tangent vector (translation then rotation):
/// returns `(R [3,3], t [3])`. Uses quadratic Taylor forms of the rotation
/// coefficients below θ² = 1e-8 so the branch point is numerically invisible.
pub fn se3_exp_tape(tape: &mut Tape, xi: NodeId) -> Result<(NodeId, NodeId), DiffError> {
    let rho = tape.slice_vec(xi, 0, 3)?;
    let omega = tape.slice_vec(xi, 3, 6)?;
    let t2 = tape.sum_sq(omega)?;
    let t2v = tape.value(t2).item();
    // a = sinθ/θ, b = (1-cosθ)/θ², c = (θ-sinθ)/θ³.
    let (a, b, c) = if t2v < 1e-8 {
        let t4 = tape.mul(t2, t2)?;
        let a1 = tape.scale(t2, -1.0 / 6.0);
        let a2 = tape.scale(t4, 1.0 / 120.0);
        let a12 = tape.add(a1, a2)?;
        let a = tape.add_const(a12, 1.0);
        let b1 = tape.scale(t2, -1.0 / 24.0);
        let b2 = tape.scale(t4, 1.0 / 720.0);
        let b12 = tape.add(b1, b2)?;
        let b = tape.add_const(b12, 0.5);
        let c1 = tape.scale(t2, -1.0 / 120.0);
        let c2 = tape.scale(t4, 1.0 / 5040.0);
        let c12 = tape.add(c1, c2)?;
        let c = tape.add_const(c12, 1.0 / 6.0);
        (a, b, c)
    } else {
        let theta = tape.sqrt(t2)?;
        let sin_t = tape.sin(theta);
        let cos_t = tape.cos(theta);
        let inv_theta = tape.recip(theta)?;
        let inv_t2 = tape.recip(t2)?;
        let a = tape.mul(sin_t, inv_theta)?;
        let one_minus_cos = {
            let neg = tape.neg(cos_t);
            tape.add_const(neg, 1.0)
        };
        let b = tape.mul(one_minus_cos, inv_t2)?;
        // (θ - sinθ)/θ³ = (1 - sinθ/θ)/θ².
        let one_minus_a = {
            let neg = tape.neg(a);
            tape.add_const(neg, 1.0)
        };
        let c = tape.mul(one_minus_a, inv_t2)?;
        (a, b, c)
    };
    let hat = tape.skew3(omega)?;
    let hat2 = tape.matmul(hat, hat)?;
    let eye = tape.constant(Tensor::identity(3));
    let a_hat = tape.scale_t(hat, a)?;
    let b_hat2 = tape.scale_t(hat2, b)?;
    let r_partial = tape.add(eye, a_hat)?;
    let r = tape.add(r_partial, b_hat2)?;

    let b_hat = tape.scale_t(hat, b)?;
    let c_hat2 = tape.scale_t(hat2, c)?;
    let v_partial = tape.add(eye, b_hat)?;
    let v = tape.add(v_partial, c_hat2)?;
    let rho_col = tape.reshape(rho, vec![3, 1])?;
    let t_col = tape.matmul(v, rho_col)?;
    let t = tape.reshape(t_col, vec![3])?;
    Ok((r, t))
}

/// Applies a pose to a `[3]` point: `R p + t`.
pub fn transform_tape(
    tape: &mut Tape,
    r: NodeId,
    t: NodeId,
    p: NodeId,
) -> Result<NodeId, DiffError> {
    let p_col = tape.reshape(p, vec![3, 1])?;
    let rp = tape.matmul(r, p_col)?;
    let rp_v = tape.reshape(rp, vec![3])?;
    tape.add(rp_v, t)
}

/// Pinhole projection of a `[3]` camera-frame point to `[2]` pixels. Errors
/// when the depth is at or below the near plane.
pub fn project_tape(
    tape: &mut Tape,
    u: NodeId,
    k: &CameraIntrinsics,
) -> Result<NodeId, SolverError> {
    let uz_val = tape.value(u).data()[2];
    if uz_val <= MIN_DEPTH {
        return Err(SolverError::Geometry(
            crate::geometry::GeometryError::BehindCamera { depth: uz_val },
        ));
    }
    let ux = tape.slice_vec(u, 0, 1)?;
    let uy = tape.slice_vec(u, 1, 2)?;
    let uz = tape.slice_vec(u, 2, 3)?;
    let inv_z = tape.recip(uz)?;
    let xz = tape.mul(ux, inv_z)?;
    let yz = tape.mul(uy, inv_z)?;
    let px = tape.scale(xz, k.fx);
    let px = tape.add_const(px, k.cx);
    let py = tape.scale(yz, k.fy);
    let py = tape.add_const(py, k.cy);
    Ok(tape.concat_vecs(&[px, py])?)
}

/// The 2×3 Jacobian of the pinhole projection at `u`:
/// `[[fx/uz, 0, -fx·ux/uz²], [0, fy/uz, -fy·uy/uz²]]`.
pub fn projection_jacobian_tape(
    tape: &mut Tape,
    u: NodeId,
    k: &CameraIntrinsics,
) -> Result<NodeId, DiffError> {
    let ux = tape.slice_vec(u, 0, 1)?;
    let uy = tape.slice_vec(u, 1, 2)?;
    let uz = tape.slice_vec(u, 2, 3)?;
    let inv_z = tape.recip(uz)?;
    let inv_z2 = tape.mul(inv_z, inv_z)?;
    let j00 = tape.scale(inv_z, k.fx);
    let j11 = tape.scale(inv_z, k.fy);
    let xz2 = tape.mul(ux, inv_z2)?;
    let j02 = tape.scale(xz2, -k.fx);
    let yz2 = tape.mul(uy, inv_z2)?;
    let j12 = tape.scale(yz2, -k.fy);
    let j00 = tape.reshape(j00, vec![1, 1])?;
    let j02 = tape.reshape(j02, vec![1, 1])?;
    let j11 = tape.reshape(j11, vec![1, 1])?;
    let j12 = tape.reshape(j12, vec![1, 1])?;
    Ok(tape.assemble(2, 3, &[(j00, 0, 0), (j02, 0, 2), (j11, 1, 1), (j12, 1, 2)])?)
}

fn normalized_cam_vec(
    tape: &mut Tape,
    x: NodeId,
    k: &CameraIntrinsics,
) -> Result<NodeId, DiffError> {
    let px = tape.slice_vec(x, 0, 1)?;
    let py = tape.slice_vec(x, 1, 2)?;
    let nx = tape.add_const(px, -k.cx);
    let nx = tape.scale(nx, 1.0 / k.fx);
    let ny = tape.add_const(py, -k.cy);
    let ny = tape.scale(ny, 1.0 / k.fy);
    let one = tape.constant(Tensor::vector(vec![1.0]));
    tape.concat_vecs(&[nx, ny, one])
}

fn unit(tape: &mut Tape, v: NodeId) -> Result<NodeId, DiffError> {
    let n = tape.norm2(v)?;
    let inv = tape.recip(n)?;
    tape.scale_t(v, inv)
}

/// Midpoint triangulation on the tape: `x_a`, `x_b` are `[2]` pixel nodes,
/// the relative pose is given as `(R [3,3], t [3])` nodes. Returns the `[3]`
/// landmark in the first camera's frame.
pub fn triangulate_tape(
    tape: &mut Tape,
    r_ab: NodeId,
    t_ab: NodeId,
    x_a: NodeId,
    x_b: NodeId,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<NodeId, SolverError> {
    let da_raw = normalized_cam_vec(tape, x_a, k_a)?;
    let da = unit(tape, da_raw)?;
    let db_cam = normalized_cam_vec(tape, x_b, k_b)?;
    let r_t = tape.transpose(r_ab)?;
    let db_col = tape.reshape(db_cam, vec![3, 1])?;
    let db_rot = tape.matmul(r_t, db_col)?;
    let db_raw = tape.reshape(db_rot, vec![3])?;
    let db = unit(tape, db_raw)?;
    let t_col = tape.reshape(t_ab, vec![3, 1])?;
    let ob_col = tape.matmul(r_t, t_col)?;
    let ob_pos = tape.reshape(ob_col, vec![3])?;
    let ob = tape.neg(ob_pos);

    let b = tape.dot(da, db)?;
    let d = tape.dot(da, ob)?;
    let e = tape.dot(db, ob)?;
    let b2 = tape.mul(b, b)?;
    let neg_b2 = tape.neg(b2);
    let denom = tape.add_const(neg_b2, 1.0);
    // denom = sin²(angle) for unit rays.
    let denom_val = tape.value(denom).item();
    if denom_val < 1e-10 {
        return Err(SolverError::Geometry(
            crate::geometry::GeometryError::DegenerateTriangulation {
                angle: denom_val.max(0.0).sqrt(),
            },
        ));
    }
    let inv_denom = tape.recip(denom)?;
    let be = tape.mul(b, e)?;
    let d_be = tape.sub(d, be)?;
    let s = tape.mul(d_be, inv_denom)?;
    let bd = tape.mul(b, d)?;
    let bd_e = tape.sub(bd, e)?;
    let u = tape.mul(bd_e, inv_denom)?;

    let pa = tape.scale_t(da, s)?;
    let qb = tape.scale_t(db, u)?;
    let q = tape.add(ob, qb)?;
    let sum = tape.add(pa, q)?;
    Ok(tape.scale(sum, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::geometry::{triangulate, Pose, RelativePose};
    use nalgebra::{Vector2, Vector6};

    #[test]
    fn exp_matches_plain_geometry() {
        let xi = Vector6::new(0.3, -0.2, 0.5, 0.2, -0.4, 0.1);
        let plain = Pose::exp(&xi);
        let mut tape = Tape::new();
        let xin = tape.constant(Tensor::vector(xi.iter().copied().collect()));
        let (r, t) = se3_exp_tape(&mut tape, xin).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((tape.value(r).get(i, j) - plain.r[(i, j)]).abs() < 1e-14);
            }
            assert!((tape.value(t).data()[i] - plain.t[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn exp_gradient_including_small_angle_branch() {
        for scale in [1.0, 1e-5] {
            let xi = Tensor::vector(vec![
                0.3,
                -0.2,
                0.5,
                0.2 * scale,
                -0.4 * scale,
                0.1 * scale,
            ]);
            let err = gradcheck(
                |tape, x| {
                    let (r, t) = se3_exp_tape(tape, x)?;
                    let c = tape.constant(Tensor::matrix(
                        3,
                        3,
                        vec![0.3, -0.1, 0.2, 0.5, 0.4, -0.2, 0.1, 0.6, -0.3],
                    ));
                    let rs = tape.mul(r, c)?;
                    let a = tape.sum_all(rs);
                    let b = tape.sum_sq(t)?;
                    tape.add(a, b)
                },
                &xi,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "exp gradient error {err} at scale {scale}");
        }
    }

    #[test]
    fn projection_jacobian_matches_gradcheck() {
        let k = CameraIntrinsics::new(420.0, 430.0, 310.0, 250.0, 640.0, 480.0).unwrap();
        let u0 = Tensor::vector(vec![0.4, -0.3, 2.5]);
        // The Jacobian rows must equal the gradient of each pixel coordinate.
        for row in 0..2 {
            let err = gradcheck(
                |tape, u| {
                    let px = project_tape(tape, u, &k).map_err(|_| DiffError::NonFinite {
                        op: "project",
                    })?;
                    let sel = tape.slice_vec(px, row, row + 1)?;
                    Ok(tape.sum_all(sel))
                },
                &u0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "projection row {row} gradient error {err}");
        }
        // And the assembled Jacobian must match those gradients entrywise.
        let mut tape = Tape::new();
        let u = tape.var(u0.clone());
        let j = projection_jacobian_tape(&mut tape, u, &k).unwrap();
        let px = project_tape(&mut tape, u, &k).unwrap();
        for row in 0..2 {
            let sel = tape.slice_vec(px, row, row + 1).unwrap();
            let s = tape.sum_all(sel);
            tape.backward(s).unwrap();
            let g = tape.grad(u).unwrap();
            for col in 0..3 {
                assert!((tape.value(j).get(row, col) - g.data()[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangulation_matches_plain_geometry() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let rel = RelativePose::with_scale(Pose::exp(&Vector6::new(
            -0.5, 0.1, 0.04, 0.05, -0.3, 0.02,
        )));
        let y = nalgebra::Vector3::new(0.2, -0.4, 3.5);
        let xa = k.project(&y).unwrap();
        let xb = k.project(&rel.pose.act(&y)).unwrap();
        let plain = triangulate(&rel, &xa, &xb, &k, &k).unwrap();

        let mut tape = Tape::new();
        let r = tape.constant(Tensor::matrix(
            3,
            3,
            rel.pose.r.transpose().as_slice().to_vec(),
        ));
        let t = tape.constant(Tensor::vector(rel.pose.t.iter().copied().collect()));
        let xa_n = tape.constant(Tensor::vector(vec![xa.x, xa.y]));
        let xb_n = tape.constant(Tensor::vector(vec![xb.x, xb.y]));
        let got = triangulate_tape(&mut tape, r, t, xa_n, xb_n, &k, &k).unwrap();
        for i in 0..3 {
            assert!(
                (tape.value(got).data()[i] - plain[i]).abs() < 1e-10,
                "component {i}"
            );
        }
    }

    #[test]
    fn triangulation_gradient_wrt_pixels() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let rel = RelativePose::with_scale(Pose::exp(&Vector6::new(
            -0.5, 0.1, 0.04, 0.05, -0.3, 0.02,
        )));
        let y = nalgebra::Vector3::new(0.2, -0.4, 3.5);
        let xa = k.project(&y).unwrap();
        let xb = k.project(&rel.pose.act(&y)).unwrap();
        let pix = Tensor::vector(vec![xa.x, xa.y, xb.x, xb.y]);
        let rel_c = rel;
        let err = gradcheck(
            move |tape, p| {
                let r = tape.constant(Tensor::matrix(
                    3,
                    3,
                    rel_c.pose.r.transpose().as_slice().to_vec(),
                ));
                let t = tape.constant(Tensor::vector(rel_c.pose.t.iter().copied().collect()));
                let xa_n = tape.slice_vec(p, 0, 2)?;
                let xb_n = tape.slice_vec(p, 2, 4)?;
                let y = triangulate_tape(tape, r, t, xa_n, xb_n, &k, &k)
                    .map_err(|_| DiffError::NonFinite { op: "tri" })?;
                tape.sum_sq(y)
            },
            &pix,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "triangulation gradient error {err}");
    }
}
