use nalgebra::{Matrix3, Vector3, Vector6};

use super::epipolar::skew;

/// Rigid transform `X' = R X + t`. The se(3) vector form follows the
/// translation-then-rotation ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Pose { r, t }
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            r: self.r * rhs.r,
            t: self.r * rhs.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// Camera center for a world-to-camera pose: `c = -Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Exponential map from `[ρ ‖ ω]` (translation, then rotation).
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta2 = omega.norm_squared();
        let omega_hat = skew(&omega);
        let omega_hat2 = omega_hat * omega_hat;
        // sin(θ)/θ, (1-cos θ)/θ², (θ-sin θ)/θ³ with Taylor guards.
        let (a, b, c) = if theta2 < 1e-16 {
            (
                1.0 - theta2 / 6.0,
                0.5 - theta2 / 24.0,
                1.0 / 6.0 - theta2 / 120.0,
            )
        } else {
            let theta = theta2.sqrt();
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let r = Matrix3::identity() + omega_hat * a + omega_hat2 * b;
        let v = Matrix3::identity() + omega_hat * b + omega_hat2 * c;
        Pose { r, t: v * rho }
    }

    /// Logarithm map; inverse of [`Pose::exp`] for rotation angles below π.
    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.r);
        let theta2 = omega.norm_squared();
        let omega_hat = skew(&omega);
        let omega_hat2 = omega_hat * omega_hat;
        // V⁻¹ = I − ω̂/2 + d·ω̂², d = (1/θ²)(1 − (θ sin θ)/(2(1−cos θ))).
        let d = if theta2 < 1e-16 {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            let theta = theta2.sqrt();
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
        };
        let v_inv = Matrix3::identity() - omega_hat * 0.5 + omega_hat2 * d;
        let rho = v_inv * self.t;
        Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn is_rotation_valid(&self, tol: f64) -> bool {
        let rtr = self.r.transpose() * self.r;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((rtr[(i, j)] - want).abs());
            }
        }
        err < tol && (self.r.determinant() - 1.0).abs() < tol
    }
}

/// SO(3) log, stable near both identity and π.
fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-10 {
        return vee * 0.5;
    }
    if theta > std::f64::consts::PI - 1e-6 {
        // Near π the vee part vanishes; recover the axis from R + I.
        let m = r + Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &b| {
                m.column(a)
                    .norm()
                    .partial_cmp(&m.column(b).norm())
                    .unwrap()
            })
            .unwrap();
        let mut axis = m.column(col).into_owned();
        axis /= axis.norm();
        // Resolve the sign with the (possibly tiny) vee part.
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Relative pose between two cameras; translation is unit length whenever the
/// scale is unknown (the two-view case).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub pose: Pose,
    pub scale_known: bool,
}

impl RelativePose {
    /// Two-view result: translation renormalized to unit length.
    pub fn up_to_scale(pose: Pose) -> Self {
        let n = pose.t.norm();
        let t = if n > 0.0 { pose.t / n } else { pose.t };
        RelativePose {
            pose: Pose::new(pose.r, t),
            scale_known: false,
        }
    }

    pub fn with_scale(pose: Pose) -> Self {
        RelativePose {
            pose,
            scale_known: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exp_log_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            // Rotation angle strictly below π.
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(0.0..std::f64::consts::PI - 1e-3);
            let omega = axis * angle;
            let rho = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let xi = Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z);
            let back = Pose::exp(&xi).log();
            max_err = max_err.max((back - xi).norm());
        }
        assert!(max_err < 1e-9, "max roundtrip error {max_err}");
    }

    #[test]
    fn exp_reproduces_rotation_matrix() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.0, 0.0, std::f64::consts::FRAC_PI_4);
        let p = Pose::exp(&xi);
        assert!(p.is_rotation_valid(1e-10));
        assert!((p.rotation_angle() - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn compose_inverse_is_identity() {
        let xi = Vector6::new(0.4, 0.1, -0.7, 0.3, -0.2, 0.5);
        let p = Pose::exp(&xi);
        let e = p.compose(&p.inverse());
        assert!((e.r - Matrix3::identity()).norm() < 1e-12);
        assert!(e.t.norm() < 1e-12);
    }
}
