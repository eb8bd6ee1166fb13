//! Tuple rendering: projected keypoints with pixel noise, noisy unit
//! descriptors, detection confidences, outlier injection by descriptor
//! swapping, and ground-truth labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::Scene;
use super::{FrameData, PairLabels, SynthError, TupleSample};
use crate::matcher::KeypointSet;
use crate::training::{generate_labels, LabelThresholds};

#[derive(Clone, Debug)]
pub struct RenderParams {
    /// Gaussian pixel noise on keypoint coordinates.
    pub noise_px: f64,
    /// Gaussian noise added to unit descriptors before renormalization.
    pub desc_noise: f64,
    /// Fraction of keypoints per frame whose descriptor is swapped with an
    /// unrelated landmark's.
    pub outlier_frac: f64,
    pub thresholds: LabelThresholds,
}

impl RenderParams {
    pub fn toy() -> Self {
        RenderParams {
            noise_px: 1.0,
            desc_noise: 0.1,
            outlier_frac: 0.0,
            thresholds: LabelThresholds::indoor(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn noisy_descriptor(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let mut d: Vec<f64> = base.iter().map(|&x| x + sigma * normal(rng)).collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    d.iter_mut().for_each(|x| *x /= n);
    d
}

/// Renders all frames of a scene into a tuple sample.
pub fn render_tuple(
    scene: &Scene,
    params: &RenderParams,
    seed: u64,
) -> Result<TupleSample, SynthError> {
    assert!(params.noise_px >= 0.0);
    assert!(
        (0.0..=0.5).contains(&params.outlier_frac),
        "outlier fraction {} outside [0, 0.5]",
        params.outlier_frac
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scene.cameras.len();
    // Every frame selects the same keypoint count, bounded by the scene's
    // guaranteed visibility.
    let min_visible = (0..n).map(|i| scene.visible(i).len()).min().unwrap_or(0);
    let count = scene.keypoints_per_frame.min(min_visible).max(1);

    let selections: Vec<Vec<usize>> = (0..n).map(|i| scene.selected(i, count)).collect();

    let mut frames = Vec::with_capacity(n);
    for (i, selection) in selections.iter().enumerate() {
        let (pose, k) = &scene.cameras[i];
        let mut coords = Vec::with_capacity(selection.len());
        let mut depths = Vec::with_capacity(selection.len());
        let mut confidences = Vec::with_capacity(selection.len());
        let mut descriptors = Vec::with_capacity(selection.len());
        for &l in selection {
            let cam_pt = pose.act(&scene.landmarks[l]);
            let px = k
                .project(&cam_pt)
                .expect("selected landmarks are in front by construction");
            coords.push([
                px.x + params.noise_px * normal(&mut rng),
                px.y + params.noise_px * normal(&mut rng),
            ]);
            depths.push(cam_pt.z);
            confidences.push(rng.random_range(0.5..1.0));
            descriptors.push(noisy_descriptor(
                &mut rng,
                &scene.descriptors_gt[l],
                params.desc_noise,
            ));
        }
        frames.push(FrameData {
            intrinsics: *k,
            pose_gt: *pose,
            keypoints: KeypointSet {
                coords,
                confidences,
                descriptors,
            },
            depths,
        });
    }

    // Outlier injection: replace descriptors with those of landmarks that
    // are selected in some other frame but not in this one, creating
    // plausible wrong matches.
    let mut outlier_flags: Vec<Vec<bool>> = selections
        .iter()
        .map(|s| vec![false; s.len()])
        .collect();
    if params.outlier_frac > 0.0 {
        let per_frame = ((count as f64) * params.outlier_frac).round() as usize;
        for fi in 0..n {
            let own: std::collections::BTreeSet<usize> =
                selections[fi].iter().copied().collect();
            let mut candidates: Vec<usize> = Vec::new();
            for (fj, sel) in selections.iter().enumerate() {
                if fj == fi {
                    continue;
                }
                for &l in sel {
                    if !own.contains(&l) && !candidates.contains(&l) {
                        candidates.push(l);
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            // Choose keypoint slots to corrupt.
            let mut slots: Vec<usize> = (0..selections[fi].len()).collect();
            for s in 0..per_frame.min(slots.len()) {
                let pick = rng.random_range(s..slots.len());
                slots.swap(s, pick);
            }
            for &slot in slots.iter().take(per_frame) {
                let repl = candidates[rng.random_range(0..candidates.len())];
                frames[fi].keypoints.descriptors[slot] = noisy_descriptor(
                    &mut rng,
                    &scene.descriptors_gt[repl],
                    params.desc_noise,
                );
                outlier_flags[fi][slot] = true;
            }
        }
    }

    // Ground-truth labels per pair; outlier-flagged keypoints never appear
    // as matches.
    let mut labels = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let mut l = generate_labels(
                &frames[a].keypoints.coords,
                &frames[b].keypoints.coords,
                &frames[a].depths,
                &frames[b].depths,
                &frames[a].pose_gt,
                &frames[b].pose_gt,
                &frames[a].intrinsics,
                &frames[b].intrinsics,
                &params.thresholds,
            )?;
            l.matches
                .retain(|&(i, j)| !outlier_flags[a][i] && !outlier_flags[b][j]);
            // Consistency guarantee on synthetic labels: a labeled match
            // reprojects within 4× the pixel-noise level. The 5 px label
            // threshold alone admits tail draws slightly beyond that.
            if params.noise_px > 0.0 {
                let budget = 4.0 * params.noise_px;
                let (fa, fb) = (&frames[a], &frames[b]);
                let rel = fb.pose_gt.compose(&fa.pose_gt.inverse());
                l.matches.retain(|&(i, j)| {
                    let p = fa.intrinsics.backproject(
                        &nalgebra::Vector2::new(
                            fa.keypoints.coords[i][0],
                            fa.keypoints.coords[i][1],
                        ),
                        fa.depths[i],
                    );
                    match fb.intrinsics.project(&rel.act(&p)) {
                        Ok(proj) => {
                            (proj
                                - nalgebra::Vector2::new(
                                    fb.keypoints.coords[j][0],
                                    fb.keypoints.coords[j][1],
                                ))
                            .norm()
                                <= budget
                        }
                        Err(_) => false,
                    }
                });
            }
            labels.push(PairLabels { a, b, labels: l });
        }
    }

    Ok(TupleSample {
        frames,
        labels,
        outlier_flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn noise_free_tuple_pairs_covisible_landmarks() {
        let cfg = SceneConfig::toy();
        let scene = generate_scene(&cfg, 11).unwrap();
        let params = RenderParams {
            noise_px: 0.0,
            desc_noise: 0.0,
            outlier_frac: 0.0,
            thresholds: LabelThresholds::indoor(),
        };
        let tuple = render_tuple(&scene, &params, 5).unwrap();
        // Every co-selected landmark pair must be labeled as a match.
        let k = tuple.frames[0].keypoints.len();
        let sel: Vec<Vec<usize>> = (0..cfg.cameras).map(|i| scene.selected(i, k)).collect();
        for pl in &tuple.labels {
            let (a, b) = (pl.a, pl.b);
            let expected: Vec<(usize, usize)> = sel[a]
                .iter()
                .enumerate()
                .filter_map(|(ia, la)| {
                    sel[b].iter().position(|lb| lb == la).map(|ib| (ia, ib))
                })
                .collect();
            let mut got = pl.labels.matches.clone();
            got.sort_unstable();
            let mut want = expected;
            want.sort_unstable();
            assert_eq!(got, want, "pair ({a},{b})");
        }
    }

    #[test]
    fn outliers_are_flagged_and_never_labeled() {
        let cfg = SceneConfig::toy();
        let scene = generate_scene(&cfg, 13).unwrap();
        let params = RenderParams {
            noise_px: 1.0,
            desc_noise: 0.1,
            outlier_frac: 0.2,
            thresholds: LabelThresholds::indoor(),
        };
        let tuple = render_tuple(&scene, &params, 9).unwrap();
        let k = tuple.frames[0].keypoints.len();
        let expected = ((k as f64) * 0.2).round() as usize;
        for flags in &tuple.outlier_flags {
            let got = flags.iter().filter(|f| **f).count();
            assert!(
                got == expected || got + 1 == expected || got == expected + 1,
                "outlier count {got} vs expected {expected}"
            );
        }
        for pl in &tuple.labels {
            for &(i, j) in &pl.labels.matches {
                assert!(!tuple.outlier_flags[pl.a][i]);
                assert!(!tuple.outlier_flags[pl.b][j]);
            }
        }
    }

    #[test]
    fn gt_matches_reproject_within_noise_budget() {
        let cfg = SceneConfig::toy();
        let scene = generate_scene(&cfg, 17).unwrap();
        let noise = 1.0;
        let params = RenderParams {
            noise_px: noise,
            desc_noise: 0.1,
            outlier_frac: 0.0,
            thresholds: LabelThresholds::indoor(),
        };
        let tuple = render_tuple(&scene, &params, 3).unwrap();
        for pl in &tuple.labels {
            let (fa, fb) = (&tuple.frames[pl.a], &tuple.frames[pl.b]);
            let rel = fb.pose_gt.compose(&fa.pose_gt.inverse());
            for &(i, j) in &pl.labels.matches {
                let p = fa.intrinsics.backproject(
                    &nalgebra::Vector2::new(
                        fa.keypoints.coords[i][0],
                        fa.keypoints.coords[i][1],
                    ),
                    fa.depths[i],
                );
                let proj = fb.intrinsics.project(&rel.act(&p)).unwrap();
                let d = (proj
                    - nalgebra::Vector2::new(
                        fb.keypoints.coords[j][0],
                        fb.keypoints.coords[j][1],
                    ))
                .norm();
                assert!(d <= noise * 4.0, "match ({i},{j}) reprojects {d:.2}px away");
            }
        }
    }
}
