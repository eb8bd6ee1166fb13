//! Dataset file format: JSON with full double precision, rotation matrices
//! row-major.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Dataset, FrameData, PairLabels, SynthError, TupleSample, DATASET_VERSION};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::matcher::KeypointSet;

#[derive(Serialize, Deserialize)]
struct PoseJson {
    /// Row-major 3×3 rotation.
    r: Vec<f64>,
    t: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let mut r = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                r.push(p.r[(i, j)]);
            }
        }
        PoseJson {
            r,
            t: [p.t.x, p.t.y, p.t.z],
        }
    }
}

impl PoseJson {
    fn to_pose(&self) -> Result<Pose, SynthError> {
        if self.r.len() != 9 {
            return Err(SynthError::Format(format!(
                "rotation needs 9 entries, got {}",
                self.r.len()
            )));
        }
        Ok(Pose::new(
            Matrix3::from_row_slice(&self.r),
            Vector3::new(self.t[0], self.t[1], self.t[2]),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    intrinsics: CameraIntrinsics,
    pose_gt: PoseJson,
    keypoints: KeypointSet,
    depths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TupleJson {
    frames: Vec<FrameJson>,
    labels: Vec<PairLabels>,
    outlier_flags: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    version: u32,
    seed: u64,
    tuples: Vec<TupleJson>,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), SynthError> {
    let json = DatasetJson {
        version: dataset.version,
        seed: dataset.seed,
        tuples: dataset
            .tuples
            .iter()
            .map(|t| TupleJson {
                frames: t
                    .frames
                    .iter()
                    .map(|f| FrameJson {
                        intrinsics: f.intrinsics,
                        pose_gt: (&f.pose_gt).into(),
                        keypoints: f.keypoints.clone(),
                        depths: f.depths.clone(),
                    })
                    .collect(),
                labels: t.labels.clone(),
                outlier_flags: t.outlier_flags.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&json).map_err(|e| SynthError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let json: DatasetJson =
        serde_json::from_str(&text).map_err(|e| SynthError::Format(e.to_string()))?;
    if json.version != DATASET_VERSION {
        return Err(SynthError::Format(format!(
            "unsupported dataset version {}",
            json.version
        )));
    }
    let tuples = json
        .tuples
        .into_iter()
        .map(|t| {
            let frames = t
                .frames
                .into_iter()
                .map(|f| {
                    Ok(FrameData {
                        intrinsics: f.intrinsics,
                        pose_gt: f.pose_gt.to_pose()?,
                        keypoints: f.keypoints,
                        depths: f.depths,
                    })
                })
                .collect::<Result<Vec<_>, SynthError>>()?;
            Ok(TupleSample {
                frames,
                labels: t.labels,
                outlier_flags: t.outlier_flags,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Dataset {
        version: json.version,
        seed: json.seed,
        tuples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, RenderParams, SceneConfig};

    #[test]
    fn roundtrip_preserves_values_bitwise() {
        let mut cfg = SceneConfig::toy();
        cfg.landmarks = 80;
        cfg.keypoints_per_frame = 8;
        cfg.min_visible = 10;
        let params = RenderParams::toy();
        let ds = generate_dataset(&cfg, &params, 2, 99).unwrap();
        let dir = std::env::temp_dir().join("pke2_schema_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.json");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.tuples.len(), ds.tuples.len());
        for (a, b) in ds.tuples.iter().zip(back.tuples.iter()) {
            for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                assert_eq!(fa.pose_gt, fb.pose_gt);
                assert_eq!(fa.depths, fb.depths);
                assert_eq!(fa.keypoints.coords, fb.keypoints.coords);
                assert_eq!(fa.keypoints.descriptors, fb.keypoints.descriptors);
            }
            assert_eq!(a.outlier_flags, b.outlier_flags);
            for (la, lb) in a.labels.iter().zip(b.labels.iter()) {
                assert_eq!(la.labels, lb.labels);
            }
        }
        // Writing the reloaded dataset reproduces the file bitwise.
        let path2 = dir.join("ds2.json");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&path2).unwrap();
    }
}
