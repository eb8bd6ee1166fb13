//! Multi-view pose pipeline: pairwise relative poses, maximum spanning tree
//! initialization, rotation and translation averaging, global bundle
//! adjustment and AUC metrics.

mod auc;
mod averaging;
mod evaluate;
mod globalba;
mod graph;

pub use auc::{auc, AucReport, PairErrorRecord, DEFAULT_THRESHOLDS};
pub use averaging::{
    poses_from_rotations_and_centers, rotation_averaging, translation_averaging,
    RotationAveraging,
};
pub use evaluate::{
    evaluate_tuples, pairwise_poses, solve_tuple, PipelineConfig, TupleDiagnostics, TwoViewSolver,
};
pub use globalba::global_bundle_adjust;
pub use graph::{max_spanning_tree, PoseGraph, PoseGraphEdge};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MultiviewError {
    #[error("match graph is disconnected: components {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("collinear camera configuration; translation scale unrecoverable")]
    Collinear,
    #[error(transparent)]
    Matcher(#[from] crate::matcher::MatcherError),
    #[error(transparent)]
    Solver(#[from] crate::posesolver::SolverError),
}
