//! Multi-view graph attention matching: keypoint encoding, alternating
//! self/cross attention over N images, log-domain Sinkhorn partial assignment
//! per image pair, mutual-match extraction and confidence prediction.

mod config;
mod confidence;
mod extract;
mod gnn;
mod pipeline;
mod sinkhorn;
mod weights;

pub use config::{EdgeType, MatcherConfig};
pub use confidence::predict_confidence;
pub use extract::extract_matches;
pub use gnn::{encode_keypoints, feature_norm, gnn_forward, FrameNodes, MessageCounter};
pub use pipeline::{
    count_messages, match_tuple, LayerMessages, MatchMode, PairAssignment, TupleMatches,
};
pub use sinkhorn::{assign_pair, log_sinkhorn};
pub use weights::{BoundWeights, MatcherWeights, WeightsIoError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::DiffError;

/// Per-image keypoints: pixel coordinates, detection confidences and
/// D-dimensional descriptors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub descriptors: Vec<Vec<f64>>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self, descriptor_dim: usize) -> Result<(), MatcherError> {
        if self.is_empty() {
            return Err(MatcherError::EmptyFrame);
        }
        if self.confidences.len() != self.len() || self.descriptors.len() != self.len() {
            return Err(MatcherError::Config(format!(
                "inconsistent keypoint set: {} coords, {} confidences, {} descriptors",
                self.len(),
                self.confidences.len(),
                self.descriptors.len()
            )));
        }
        for d in &self.descriptors {
            if d.len() != descriptor_dim {
                return Err(MatcherError::Config(format!(
                    "descriptor width {} does not match configured {}",
                    d.len(),
                    descriptor_dim
                )));
            }
        }
        Ok(())
    }
}

/// One cross-image correspondence with its predicted confidence weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub frame_a: usize,
    pub idx_a: usize,
    pub frame_b: usize,
    pub idx_b: usize,
    /// Predicted confidence w ∈ (0,1).
    pub weight: f64,
    /// Assignment probability from the Sinkhorn matrix.
    pub score: f64,
}

/// Matches over all image pairs of a tuple.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn for_pair(&self, a: usize, b: usize) -> impl Iterator<Item = &Match> {
        self.matches
            .iter()
            .filter(move |m| m.frame_a == a && m.frame_b == b)
    }
}

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("empty keypoint frame")]
    EmptyFrame,
    #[error("matching needs at least two frames")]
    SingleFrame,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
