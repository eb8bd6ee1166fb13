//! Ground-truth label generation, match and pose losses, the two-stage loss
//! schedule, Adam, and the toy end-to-end training loop.

mod adam;
mod checks;
mod labels;
mod losses;
mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checks::{
    check_bundle_adjust, check_eight_point, check_sinkhorn, check_total_loss, micro_tuple,
    run_all as run_gradcheck_suite, CheckResult,
};
pub use labels::{generate_labels, LabelThresholds};
pub use losses::{
    match_loss, pose_loss_plain, pose_loss_tape, MatchLossTerms, LOG_FLOOR,
};
pub use train::{train_toy, Stage, TrainConfig, TrainOutcome, TrainRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth supervision for one image pair: matching keypoint pairs plus
/// keypoints that are confidently unmatched on each side. Everything else is
/// excluded from the loss.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchLabels {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

/// Linear two-stage loss schedule: during stage 2 the pose weight ramps from
/// 0 to `lambda_pose_max` while the match weight decays to
/// `lambda_match_min`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossSchedule {
    pub lambda_pose_max: f64,
    pub lambda_match_min: f64,
    pub ramp_iters: usize,
    pub lambda_rot: f64,
}

impl LossSchedule {
    /// Full-scale indoor profile.
    pub fn scannet() -> Self {
        LossSchedule {
            lambda_pose_max: 242.0,
            lambda_match_min: 0.01,
            ramp_iters: 40_000,
            lambda_rot: 3.0,
        }
    }

    pub fn matterport() -> Self {
        LossSchedule {
            lambda_pose_max: 585.0,
            lambda_match_min: 0.01,
            ramp_iters: 40_000,
            lambda_rot: 1.2,
        }
    }

    pub fn megadepth() -> Self {
        LossSchedule {
            lambda_pose_max: 345.0,
            lambda_match_min: 0.01,
            ramp_iters: 40_000,
            lambda_rot: 2.0,
        }
    }

    /// Desk-scale schedule used by the toy training runs. The pose weight
    /// is far below the paper's full-scale profiles: with tens of matches a
    /// pair, a large pose weight cannibalizes the assignment quality that
    /// the eight-point result depends on.
    pub fn toy() -> Self {
        LossSchedule {
            lambda_pose_max: 8.0,
            lambda_match_min: 0.3,
            ramp_iters: 300,
            lambda_rot: 1.0,
        }
    }

    /// `(λ_match, λ_pose)` at a stage-2 iteration; stage 1 is the constant
    /// special case `(1, 0)`.
    pub fn weights_at(&self, iteration: usize, stage: Stage) -> (f64, f64) {
        match stage {
            Stage::One => (1.0, 0.0),
            Stage::Two => {
                let t = (iteration as f64 / self.ramp_iters as f64).min(1.0);
                (
                    1.0 + t * (self.lambda_match_min - 1.0),
                    t * self.lambda_pose_max,
                )
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label generation: {0}")]
    Labels(String),
    #[error("training diverged (non-finite loss) at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Matcher(#[from] crate::matcher::MatcherError),
    #[error(transparent)]
    Diff(#[from] crate::autodiff::DiffError),
}
