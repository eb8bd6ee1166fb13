//! Ground-truth match labels from reprojection with known depth:
//! mutual-minimum pairs below the match threshold become matches, keypoints
//! whose best reprojection error exceeds the unmatched threshold are
//! confidently unmatched, everything else is excluded from the loss.

use nalgebra::Vector2;

use super::{MatchLabels, TrainError};
use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug)]
pub struct LabelThresholds {
    /// Reprojection error below which a mutual-minimum pair is a match (px).
    pub match_px: f64,
    /// Minimum reprojection error above which a keypoint is unmatched (px).
    pub unmatched_px: f64,
}

impl LabelThresholds {
    /// Indoor profile: match below 5 px, unmatched above 15 px.
    pub fn indoor() -> Self {
        LabelThresholds {
            match_px: 5.0,
            unmatched_px: 15.0,
        }
    }

    /// Outdoor profile: unmatched above 10 px.
    pub fn outdoor() -> Self {
        LabelThresholds {
            match_px: 5.0,
            unmatched_px: 10.0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn generate_labels(
    coords_a: &[[f64; 2]],
    coords_b: &[[f64; 2]],
    depths_a: &[f64],
    depths_b: &[f64],
    pose_a: &Pose,
    pose_b: &Pose,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    thresholds: &LabelThresholds,
) -> Result<MatchLabels, TrainError> {
    if depths_a.len() != coords_a.len() || depths_b.len() != coords_b.len() {
        return Err(TrainError::Labels(format!(
            "depth counts ({}, {}) do not cover keypoints ({}, {})",
            depths_a.len(),
            depths_b.len(),
            coords_a.len(),
            coords_b.len()
        )));
    }
    if depths_a.iter().chain(depths_b.iter()).any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(TrainError::Labels("missing or invalid depth".into()));
    }
    let rel_ab = pose_b.compose(&pose_a.inverse());
    let rel_ba = rel_ab.inverse();

    // Reprojection error matrices in both directions; unprojectable entries
    // stay at infinity.
    let (na, nb) = (coords_a.len(), coords_b.len());
    let mut err_ab = vec![f64::INFINITY; na * nb];
    for i in 0..na {
        let p = k_a.backproject(&Vector2::new(coords_a[i][0], coords_a[i][1]), depths_a[i]);
        let Ok(proj) = k_b.project(&rel_ab.act(&p)) else {
            continue;
        };
        for j in 0..nb {
            err_ab[i * nb + j] =
                (proj - Vector2::new(coords_b[j][0], coords_b[j][1])).norm();
        }
    }
    let mut err_ba = vec![f64::INFINITY; na * nb];
    for j in 0..nb {
        let p = k_b.backproject(&Vector2::new(coords_b[j][0], coords_b[j][1]), depths_b[j]);
        let Ok(proj) = k_a.project(&rel_ba.act(&p)) else {
            continue;
        };
        for i in 0..na {
            err_ba[i * nb + j] =
                (proj - Vector2::new(coords_a[i][0], coords_a[i][1])).norm();
        }
    }

    let argmin_row = |i: usize| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..nb {
            if err_ab[i * nb + j] < best.1 {
                best = (j, err_ab[i * nb + j]);
            }
        }
        best
    };
    let argmin_col = |j: usize| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..na {
            if err_ba[i * nb + j] < best.1 {
                best = (i, err_ba[i * nb + j]);
            }
        }
        best
    };

    let mut labels = MatchLabels::default();
    let mut matched_a = vec![false; na];
    let mut matched_b = vec![false; nb];
    for i in 0..na {
        let (j, e_ab) = argmin_row(i);
        if !e_ab.is_finite() || e_ab >= thresholds.match_px {
            continue;
        }
        let (i_back, e_ba) = argmin_col(j);
        if i_back == i && e_ba < thresholds.match_px {
            labels.matches.push((i, j));
            matched_a[i] = true;
            matched_b[j] = true;
        }
    }
    for (i, done) in matched_a.iter().enumerate() {
        if *done {
            continue;
        }
        let min: f64 = (0..nb).fold(f64::INFINITY, |acc, j| acc.min(err_ab[i * nb + j]));
        if min > thresholds.unmatched_px {
            labels.unmatched_a.push(i);
        }
    }
    for (j, done) in matched_b.iter().enumerate() {
        if *done {
            continue;
        }
        let min: f64 = (0..na).fold(f64::INFINITY, |acc, i| acc.min(err_ba[i * nb + j]));
        if min > thresholds.unmatched_px {
            labels.unmatched_b.push(j);
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    #[test]
    fn identical_frames_match_identically() {
        let k = cam();
        let coords: Vec<[f64; 2]> = (0..6)
            .map(|i| [100.0 + 70.0 * i as f64, 120.0 + 40.0 * i as f64])
            .collect();
        let depths = vec![3.0; 6];
        let labels = generate_labels(
            &coords,
            &coords,
            &depths,
            &depths,
            &Pose::identity(),
            &Pose::identity(),
            &k,
            &k,
            &LabelThresholds::indoor(),
        )
        .unwrap();
        assert_eq!(labels.matches, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(labels.unmatched_a.is_empty());
        assert!(labels.unmatched_b.is_empty());
    }

    #[test]
    fn missing_depth_is_an_error() {
        let k = cam();
        let coords = vec![[10.0, 10.0]];
        assert!(generate_labels(
            &coords,
            &coords,
            &[f64::NAN],
            &[1.0],
            &Pose::identity(),
            &Pose::identity(),
            &k,
            &k,
            &LabelThresholds::indoor(),
        )
        .is_err());
    }

    #[test]
    fn far_keypoints_are_unmatched() {
        let k = cam();
        let coords_a = vec![[100.0, 100.0], [500.0, 400.0]];
        let coords_b = vec![[100.0, 100.0]];
        let labels = generate_labels(
            &coords_a,
            &coords_b,
            &[3.0, 3.0],
            &[3.0],
            &Pose::identity(),
            &Pose::identity(),
            &k,
            &k,
            &LabelThresholds::indoor(),
        )
        .unwrap();
        assert_eq!(labels.matches, vec![(0, 0)]);
        assert_eq!(labels.unmatched_a, vec![1]);
        assert!(labels.unmatched_b.is_empty());
    }
}
