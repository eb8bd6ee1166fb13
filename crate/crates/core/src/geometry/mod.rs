//! Camera models, SE(3) poses, projection, triangulation, epipolar algebra,
//! essential-matrix decomposition and pose-error metrics. Everything here is
//! plain `f64` math; the differentiable pipeline mirrors the subset it needs
//! on the tape and is tested against these functions.

mod camera;
mod epipolar;
mod metrics;
mod se3;
mod triangulate;

pub use camera::CameraIntrinsics;
pub use epipolar::{
    decompose_essential, essential_from_fundamental, essential_from_pose, project_to_essential,
    select_cheirality, select_closest_to_gt, skew, symmetric_epipolar_distance,
    EPIPOLAR_INLIER_THRESHOLD,
};
pub use metrics::{pose_error, PoseErrorAngles};
pub use se3::{Pose, RelativePose};
pub use triangulate::triangulate;

use thiserror::Error;

/// 3D point expressed in the first camera's frame.
pub type Landmark = nalgebra::Vector3<f64>;

#[derive(Debug, Clone, Error)]
pub enum GeometryError {
    #[error("point behind camera: depth {depth:.3e}")]
    BehindCamera { depth: f64 },
    #[error("degenerate triangulation: ray angle {angle:.3e} rad")]
    DegenerateTriangulation { angle: f64 },
    #[error("no candidate pose passes the cheirality check")]
    NoValidSolution,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}
