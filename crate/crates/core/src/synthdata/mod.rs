//! Ground-truth synthetic scenes and tuples: landmarks in a box, cameras on
//! a jittered arc with controlled pairwise overlap, projected keypoints with
//! noise, learnable synthetic descriptors, and outlier injection.

mod render;
mod scene;
mod schema;

pub use render::{render_tuple, RenderParams};
pub use scene::{generate_scene, overlap, Scene, SceneConfig};
pub use schema::{read_dataset, write_dataset};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose, RelativePose};
use crate::matcher::KeypointSet;
use crate::training::{MatchLabels, TrainError};

/// One rendered frame: camera, ground-truth pose (world to camera),
/// keypoints and their true depths.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub intrinsics: CameraIntrinsics,
    pub pose_gt: Pose,
    pub keypoints: KeypointSet,
    pub depths: Vec<f64>,
}

/// Labels for one ordered image pair (a < b).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairLabels {
    pub a: usize,
    pub b: usize,
    pub labels: MatchLabels,
}

/// A rendered N-frame tuple with ground truth.
#[derive(Clone, Debug)]
pub struct TupleSample {
    pub frames: Vec<FrameData>,
    pub labels: Vec<PairLabels>,
    pub outlier_flags: Vec<Vec<bool>>,
}

impl TupleSample {
    /// Ground-truth relative pose a → b, direction only.
    pub fn relative_gt(&self, a: usize, b: usize) -> RelativePose {
        RelativePose::up_to_scale(
            self.frames[b]
                .pose_gt
                .compose(&self.frames[a].pose_gt.inverse()),
        )
    }

    pub fn labels_for(&self, a: usize, b: usize) -> Option<&MatchLabels> {
        self.labels
            .iter()
            .find(|p| p.a == a && p.b == b)
            .map(|p| &p.labels)
    }
}

/// A dataset of tuples, regenerable bitwise from its seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub version: u32,
    pub seed: u64,
    pub tuples: Vec<TupleSample>,
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },
    #[error("overlap constraint unsatisfiable: {0}")]
    Overlap(String),
    #[error("label generation failed: {0}")]
    Labels(#[from] TrainError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// Splitmix64-style seed derivation for independent deterministic streams.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generates a full dataset: one fresh scene per tuple, rendered with the
/// given noise and outlier parameters.
pub fn generate_dataset(
    scene_cfg: &SceneConfig,
    render: &RenderParams,
    tuples: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    let mut out = Vec::with_capacity(tuples);
    for t in 0..tuples {
        let scene = generate_scene(scene_cfg, derive_seed(seed, 1, t as u64))?;
        out.push(render_tuple(
            &scene,
            render,
            derive_seed(seed, 2, t as u64),
        )?);
    }
    Ok(Dataset {
        version: DATASET_VERSION,
        seed,
        tuples: out,
    })
}
