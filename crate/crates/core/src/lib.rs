//! End-to-end multi-view feature matching with differentiable pose
//! optimization: a graph-attention matcher whose matches and confidence
//! weights drive a confidence-weighted eight-point solver and unrolled
//! Gauss-Newton bundle adjustment, trained end-to-end with a pose loss,
//! plus a multi-view pose-graph evaluation pipeline on synthetic scenes.

pub mod autodiff;
pub mod geometry;
pub mod matcher;
pub mod multiview;
pub mod posesolver;
pub mod synthdata;
pub mod training;
