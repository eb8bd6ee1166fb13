use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if cx < 0.0 || cx > width || cy < 0.0 || cy > height {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}×{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a point in this camera's frame to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Inverse of `project` at a fixed depth.
    pub fn backproject(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Intrinsics-normalized (K⁻¹) coordinates of a pixel.
    pub fn normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width && px.y >= 0.0 && px.y < self.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 2.0, 2.0).unwrap();
        let px = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn hand_evaluated_projection() {
        // fx=100, cx=320, point (1,0,2): x-pixel = 100*1/2 + 320 = 370.
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let px = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((px.x - 370.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn project_backproject_identity() {
        let k = CameraIntrinsics::new(450.0, 470.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let p = Vector3::new(0.3, -0.2, 2.5);
        let px = k.project(&p).unwrap();
        let back = k.backproject(&px, p.z);
        assert!((back - p).norm() < 1e-10);
    }

    #[test]
    fn rejects_nonpositive_focal() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.5, 0.5, 1.0, 1.0).is_err());
    }
}
