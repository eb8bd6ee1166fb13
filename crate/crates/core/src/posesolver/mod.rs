//! Differentiable two-view pose estimation: Hartley-normalized
//! confidence-weighted eight-point, rank-2 enforcement, pose recovery, and
//! unrolled Gauss-Newton bundle adjustment with the residual-driven damping
//! schedule.

mod ba;
mod eightpoint;
mod normalize;
mod tapegeom;

pub use ba::{
    ba_jacobian_tape, ba_residuals_plain, ba_residuals_tape, bundle_adjust, BaConfig, BaResult,
};
pub use eightpoint::{recover_pose, weighted_eight_point, PoseNodes, RecoveryMode};
pub use normalize::{normalize_points, normalize_points_tape, normalize_points_weighted_tape};
pub use tapegeom::{
    mat3_from_tensor, projection_jacobian_tape, project_tape, se3_exp_tape, tensor_from_mat3,
    tensor_from_vec3, transform_tape, triangulate_tape, vec3_from_tensor,
};

use nalgebra::Vector2;
use thiserror::Error;

use crate::autodiff::{DiffError, NodeId, Tape, Tensor};
use crate::geometry::GeometryError;

/// Pixel correspondences with confidence weights, the constraints for pose
/// solving.
#[derive(Clone, Debug, Default)]
pub struct WeightedMatches {
    pub x_a: Vec<Vector2<f64>>,
    pub x_b: Vec<Vector2<f64>>,
    pub w: Vec<f64>,
}

impl WeightedMatches {
    pub fn len(&self) -> usize {
        self.x_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_a.is_empty()
    }

    pub fn push(&mut self, x_a: Vector2<f64>, x_b: Vector2<f64>, w: f64) {
        self.x_a.push(x_a);
        self.x_b.push(x_b);
        self.w.push(w);
    }

    pub fn push_xy(&mut self, ax: f64, ay: f64, bx: f64, by: f64, w: f64) {
        self.push(Vector2::new(ax, ay), Vector2::new(bx, by), w);
    }
}

/// Tape handles for match inputs; vars when gradients with respect to the
/// coordinates or weights are wanted.
#[derive(Clone, Copy, Debug)]
pub struct MatchNodes {
    /// M×2 pixel coordinates in the first image.
    pub x_a: NodeId,
    /// M×2 pixel coordinates in the second image.
    pub x_b: NodeId,
    /// `[M]` confidence weights.
    pub w: NodeId,
}

impl MatchNodes {
    pub fn from_weighted(
        tape: &mut Tape,
        m: &WeightedMatches,
        coords_trainable: bool,
        weights_trainable: bool,
    ) -> Self {
        let n = m.len();
        let mut xa = Tensor::zeros(vec![n, 2]);
        let mut xb = Tensor::zeros(vec![n, 2]);
        for i in 0..n {
            xa.set(i, 0, m.x_a[i].x);
            xa.set(i, 1, m.x_a[i].y);
            xb.set(i, 0, m.x_b[i].x);
            xb.set(i, 1, m.x_b[i].y);
        }
        let w = Tensor::vector(m.w.clone());
        let x_a = if coords_trainable { tape.var(xa) } else { tape.constant(xa) };
        let x_b = if coords_trainable { tape.var(xb) } else { tape.constant(xb) };
        let w = if weights_trainable { tape.var(w) } else { tape.constant(w) };
        MatchNodes { x_a, x_b, w }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.x_a).rows()
    }
}

/// Canonical match ordering by coordinate/weight tuples. Solvers gather
/// their inputs through this permutation so that floating-point summation
/// order, and therefore the result, is independent of the caller's match
/// order.
pub(crate) fn canonical_match_order(tape: &Tape, m: &MatchNodes) -> Vec<usize> {
    let xa = tape.value(m.x_a);
    let xb = tape.value(m.x_b);
    let w = tape.value(m.w);
    let key = |i: usize| {
        [
            xa.get(i, 0),
            xa.get(i, 1),
            xb.get(i, 0),
            xb.get(i, 1),
            w.data()[i],
        ]
    };
    let mut idx: Vec<usize> = (0..xa.rows()).collect();
    idx.sort_by(|&i, &j| {
        let (ki, kj) = (key(i), key(j));
        ki.iter()
            .zip(kj.iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|c| *c != std::cmp::Ordering::Equal)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

pub(crate) fn gather_match_nodes(
    tape: &mut Tape,
    m: &MatchNodes,
    order: &[usize],
) -> Result<MatchNodes, DiffError> {
    let n = tape.value(m.x_a).rows();
    let x_a = tape.gather_rows(m.x_a, order)?;
    let x_b = tape.gather_rows(m.x_b, order)?;
    let w_col = tape.reshape(m.w, vec![n, 1])?;
    let w_rows = tape.gather_rows(w_col, order)?;
    let w = tape.reshape(w_rows, vec![order.len()])?;
    Ok(MatchNodes { x_a, x_b, w })
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("need at least {need} matches, got {got}")]
    TooFewMatches { got: usize, need: usize },
    #[error("need at least {need} strictly positive weights, got {got}")]
    TooFewPositiveWeights { got: usize, need: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("bundle adjustment diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
