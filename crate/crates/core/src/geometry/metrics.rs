use super::se3::RelativePose;

/// Rotation and translation-direction errors in degrees, both in [0, 180].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrorAngles {
    pub rot_deg: f64,
    /// `None` when either translation has (near-)zero length and the
    /// direction angle is undefined.
    pub transl_deg: Option<f64>,
}

impl PoseErrorAngles {
    /// The two-view pose error: max of rotation and translation angle, with
    /// an undefined translation scored at 180°.
    pub fn max_deg(&self) -> f64 {
        self.rot_deg.max(self.transl_deg.unwrap_or(180.0))
    }
}

/// Geodesic rotation angle and translation direction angle between an
/// estimate and the ground truth. Arccos arguments are clamped so boundary
/// configurations return 0 or 180 rather than NaN.
pub fn pose_error(estimate: &RelativePose, gt: &RelativePose) -> PoseErrorAngles {
    let r_rel = estimate.pose.r.transpose() * gt.pose.r;
    let cos_rot = ((r_rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot_deg = cos_rot.acos().to_degrees();

    let (ne, ng) = (estimate.pose.t.norm(), gt.pose.t.norm());
    let transl_deg = if ne < 1e-12 || ng < 1e-12 {
        None
    } else {
        let cos_t = (estimate.pose.t.dot(&gt.pose.t) / (ne * ng)).clamp(-1.0, 1.0);
        Some(cos_t.acos().to_degrees())
    };
    PoseErrorAngles { rot_deg, transl_deg }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3::Pose;
    use nalgebra::{Vector3, Vector6};

    #[test]
    fn identical_poses_have_zero_error() {
        let p = RelativePose::up_to_scale(Pose::exp(&Vector6::new(
            0.2, -0.4, 1.0, 0.3, 0.1, -0.2,
        )));
        // acos is ill-conditioned at 1; ~1e-5 degrees is the f64 noise floor.
        let e = pose_error(&p, &p);
        assert!(e.rot_deg < 1e-5);
        assert!(e.transl_deg.unwrap() < 1e-5);
    }

    #[test]
    fn ten_degree_rotation_about_z() {
        let angle = 10f64.to_radians();
        let a = RelativePose::up_to_scale(Pose::exp(&Vector6::new(
            1.0, 0.0, 0.0, 0.0, 0.0, angle,
        )));
        let b = RelativePose::up_to_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
        ));
        let e = pose_error(&a, &b);
        assert!((e.rot_deg - 10.0).abs() < 1e-10);
    }

    #[test]
    fn opposite_translations_give_180_not_nan() {
        let a = RelativePose::up_to_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
        ));
        let b = RelativePose::up_to_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(-1.0, 0.0, 0.0),
        ));
        let e = pose_error(&a, &b);
        assert_eq!(e.transl_deg, Some(180.0));
    }

    #[test]
    fn zero_translation_flags_undefined_direction() {
        let a = RelativePose::with_scale(Pose::identity());
        let b = RelativePose::up_to_scale(Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
        ));
        let e = pose_error(&a, &b);
        assert!(e.transl_deg.is_none());
        assert_eq!(e.rot_deg, 0.0);
    }

    #[test]
    fn error_is_symmetric() {
        let a = RelativePose::up_to_scale(Pose::exp(&Vector6::new(
            0.3, 0.2, -0.5, 0.4, -0.1, 0.25,
        )));
        let b = RelativePose::up_to_scale(Pose::exp(&Vector6::new(
            -0.2, 0.6, 0.1, -0.3, 0.2, 0.05,
        )));
        let e1 = pose_error(&a, &b);
        let e2 = pose_error(&b, &a);
        assert!((e1.rot_deg - e2.rot_deg).abs() < 1e-12);
        assert!((e1.transl_deg.unwrap() - e2.transl_deg.unwrap()).abs() < 1e-12);
    }
}
