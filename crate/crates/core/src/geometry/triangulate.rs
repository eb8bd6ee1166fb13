use nalgebra::{Vector2, Vector3};

use super::camera::CameraIntrinsics;
use super::se3::RelativePose;
use super::{GeometryError, Landmark};

const MIN_RAY_ANGLE: f64 = 1e-5;

/// Midpoint triangulation: the point halfway between the closest points of
/// the two viewing rays, expressed in the first camera's frame.
pub fn triangulate(
    pose_ab: &RelativePose,
    x_a: &Vector2<f64>,
    x_b: &Vector2<f64>,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<Landmark, GeometryError> {
    let na = k_a.normalized(x_a);
    let nb = k_b.normalized(x_b);
    let da = Vector3::new(na.x, na.y, 1.0).normalize();
    let r_t = pose_ab.pose.r.transpose();
    // Camera-b ray expressed in frame a; b's center is -Rᵀt.
    let db = (r_t * Vector3::new(nb.x, nb.y, 1.0)).normalize();
    let ob = -(r_t * pose_ab.pose.t);

    let cos_angle = da.dot(&db).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    if angle < MIN_RAY_ANGLE || (std::f64::consts::PI - angle) < MIN_RAY_ANGLE {
        return Err(GeometryError::DegenerateTriangulation { angle });
    }

    // Closest points of  s·da  and  ob + u·db.
    let b = da.dot(&db);
    let d = da.dot(&ob);
    let e = db.dot(&ob);
    let denom = 1.0 - b * b;
    let s = (d - b * e) / denom;
    let u = (b * d - e) / denom;
    Ok((da * s + ob + db * u) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3::Pose;
    use nalgebra::Vector6;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    #[test]
    fn recovers_forward_projected_landmark() {
        let k = cam();
        let rel = RelativePose::with_scale(Pose::exp(&Vector6::new(
            -0.4, 0.02, 0.05, 0.03, -0.2, 0.01,
        )));
        let y = Vector3::new(0.25, -0.1, 3.0);
        let xa = k.project(&y).unwrap();
        let xb = k.project(&rel.pose.act(&y)).unwrap();
        let got = triangulate(&rel, &xa, &xb, &k, &k).unwrap();
        assert!((got - y).norm() / y.norm() < 1e-8, "err {}", (got - y).norm());
    }

    #[test]
    fn symmetric_stereo_point_on_bisector() {
        // Cameras at ±0.5 on x, both looking down z; the point on the
        // perpendicular bisector has x = 0 midway between the two centers.
        let k = cam();
        let rel = RelativePose::with_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(-1.0, 0.0, 0.0),
        ));
        // Point at x = 0.5 in frame a is on the bisector (b center is at
        // x = 1 in frame a).
        let y = Vector3::new(0.5, 0.0, 4.0);
        let xa = k.project(&y).unwrap();
        let xb = k.project(&rel.pose.act(&y)).unwrap();
        let got = triangulate(&rel, &xa, &xb, &k, &k).unwrap();
        assert!((got.x - 0.5).abs() < 1e-9);
    }

    #[test]
    fn reprojection_round_trip() {
        let k = cam();
        let rel = RelativePose::with_scale(Pose::exp(&Vector6::new(
            0.3, -0.1, 0.0, 0.0, 0.15, -0.05,
        )));
        let y = Vector3::new(-0.4, 0.3, 5.0);
        let xa = k.project(&y).unwrap();
        let xb = k.project(&rel.pose.act(&y)).unwrap();
        let got = triangulate(&rel, &xa, &xb, &k, &k).unwrap();
        let ra = k.project(&got).unwrap();
        let rb = k.project(&rel.pose.act(&got)).unwrap();
        assert!((ra - xa).norm() < 1e-6);
        assert!((rb - xb).norm() < 1e-6);
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let k = cam();
        // Pure forward translation: the principal-axis rays coincide.
        let rel = RelativePose::with_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.0, 0.0, -1.0),
        ));
        let c = Vector2::new(320.0, 240.0);
        assert!(matches!(
            triangulate(&rel, &c, &c, &k, &k),
            Err(GeometryError::DegenerateTriangulation { .. })
        ));
    }
}
