//! Global bundle adjustment over all tuple frames: tracks from pairwise
//! inlier matches via greedy union by confidence, re-triangulated points,
//! and the same damped preconditioned Gauss-Newton as the two-view solver.

use nalgebra::{Vector2, Vector3};

use super::graph::{PoseGraph, PoseGraphEdge};
use super::MultiviewError;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::{triangulate, CameraIntrinsics, Pose, RelativePose};
use crate::posesolver::{
    projection_jacobian_tape, project_tape, se3_exp_tape, tensor_from_mat3, tensor_from_vec3,
    transform_tape, vec3_from_tensor, BaConfig,
};

/// One 2D observation of a track.
#[derive(Clone, Debug)]
struct Observation {
    frame: usize,
    pixel: Vector2<f64>,
    weight: f64,
}

#[derive(Clone, Debug)]
struct Track {
    observations: Vec<Observation>,
    /// Initial point in world (frame-0) coordinates.
    point: Vector3<f64>,
}

/// Builds tracks from inlier matches: links are applied in descending
/// confidence order and a link is dropped when it would put two keypoints of
/// one frame into the same track.
fn build_tracks(edges: &[PoseGraphEdge]) -> Vec<Vec<(usize, usize, f64)>> {
    // Collect links (frame a, idx a, frame b, idx b, confidence).
    let mut links: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for e in edges {
        for (m, &(ia, ib)) in e.indices.iter().enumerate() {
            if e.inlier_mask[m] {
                links.push((e.a, ia, e.b, ib, e.matches.w[m]));
            }
        }
    }
    links.sort_by(|x, y| {
        y.4.total_cmp(&x.4)
            .then_with(|| (x.0, x.1, x.2, x.3).cmp(&(y.0, y.1, y.2, y.3)))
    });

    // Union-find over (frame, keypoint) nodes with per-component frame sets.
    let key = |f: usize, i: usize| f * 10_000 + i;
    let mut parent: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut frames_in: std::collections::BTreeMap<usize, std::collections::BTreeSet<usize>> =
        Default::default();
    fn find(parent: &mut std::collections::BTreeMap<usize, usize>, x: usize) -> usize {
        let p = *parent.get(&x).unwrap_or(&x);
        if p == x {
            return x;
        }
        let root = find(parent, p);
        parent.insert(x, root);
        root
    }
    let mut conf: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for (fa, ia, fb, ib, w) in links {
        let (ka, kb) = (key(fa, ia), key(fb, ib));
        parent.entry(ka).or_insert(ka);
        parent.entry(kb).or_insert(kb);
        frames_in.entry(ka).or_insert_with(|| [fa].into());
        frames_in.entry(kb).or_insert_with(|| [fb].into());
        let (ra, rb) = (find(&mut parent, ka), find(&mut parent, kb));
        if ra == rb {
            continue;
        }
        let sa = frames_in.get(&ra).cloned().unwrap_or_default();
        let sb = frames_in.get(&rb).cloned().unwrap_or_default();
        if !sa.is_disjoint(&sb) {
            // Would place two keypoints of one frame in the track; this is
            // the lowest-confidence link seen so far for these components.
            continue;
        }
        let root = ra.min(rb);
        let other = ra.max(rb);
        parent.insert(other, root);
        let merged: std::collections::BTreeSet<usize> = sa.union(&sb).copied().collect();
        frames_in.insert(root, merged);
        for end in [(fa, ia), (fb, ib)] {
            let e = conf.entry(end).or_insert(0.0);
            *e = e.max(w);
        }
    }

    // Group members per root.
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    let members: Vec<usize> = parent.keys().copied().collect();
    for m in members {
        let root = find(&mut parent, m);
        groups
            .entry(root)
            .or_default()
            .push((m / 10_000, m % 10_000));
    }
    groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort_unstable();
            g.into_iter()
                .map(|(f, i)| {
                    let w = conf.get(&(f, i)).copied().unwrap_or(0.5);
                    (f, i, w)
                })
                .collect()
        })
        .collect()
}

/// Refines all absolute poses (frame 0 fixed) and track points by damped
/// Gauss-Newton on the confidence-weighted reprojection error of inlier
/// matches. Tracks are re-triangulated from the incoming absolute poses.
pub fn global_bundle_adjust(
    graph: &PoseGraph,
    keypoints: &[Vec<[f64; 2]>],
    intrinsics: &[CameraIntrinsics],
    cfg: &BaConfig,
) -> Result<Vec<Pose>, MultiviewError> {
    let n = graph.n_frames;
    let groups = build_tracks(&graph.edges);
    // Re-triangulate each track from its first two observations.
    let mut tracks: Vec<Track> = Vec::new();
    for g in groups {
        let observations: Vec<Observation> = g
            .iter()
            .map(|&(f, i, w)| Observation {
                frame: f,
                pixel: Vector2::new(keypoints[f][i][0], keypoints[f][i][1]),
                weight: w,
            })
            .collect();
        let (o1, o2) = (&observations[0], &observations[1]);
        let rel = graph.absolute[o2.frame].compose(&graph.absolute[o1.frame].inverse());
        let Ok(y_local) = triangulate(
            &RelativePose::with_scale(rel),
            &o1.pixel,
            &o2.pixel,
            &intrinsics[o1.frame],
            &intrinsics[o2.frame],
        ) else {
            continue;
        };
        // To world coordinates via the first observing camera.
        let point = graph.absolute[o1.frame].inverse().act(&y_local);
        // Cheirality screen across all observations.
        let all_in_front = observations
            .iter()
            .all(|o| graph.absolute[o.frame].act(&point).z > 1e-6);
        if all_in_front {
            tracks.push(Track {
                observations,
                point,
            });
        }
    }
    if tracks.is_empty() {
        return Ok(graph.absolute.clone());
    }

    // State: poses 1..N-1 as (R, t) nodes, then one [3] node per track.
    let mut tape = Tape::new();
    let mut pose_nodes: Vec<(NodeId, NodeId)> = graph
        .absolute
        .iter()
        .map(|p| {
            (
                tape.constant(tensor_from_mat3(&p.r)),
                tape.constant(tensor_from_vec3(&p.t)),
            )
        })
        .collect();
    let mut point_nodes: Vec<NodeId> = tracks
        .iter()
        .map(|t| tape.constant(tensor_from_vec3(&t.point)))
        .collect();

    let n_obs: usize = tracks.iter().map(|t| t.observations.len()).sum();
    let unknowns = 6 * (n - 1) + 3 * tracks.len();
    let mut beta = cfg.beta0;
    let mut prev_norm: Option<f64> = None;

    for _it in 0..cfg.iterations {
        let mut residual_parts = Vec::with_capacity(n_obs);
        let mut blocks = Vec::new();
        let eye3 = tape.constant(Tensor::identity(3));
        let mut row = 0usize;
        let mut build_failed = false;
        for (ti, track) in tracks.iter().enumerate() {
            let y = point_nodes[ti];
            for obs in &track.observations {
                let (r_n, t_n) = pose_nodes[obs.frame];
                let u = transform_tape(&mut tape, r_n, t_n, y)
                    .map_err(crate::posesolver::SolverError::from)?;
                if tape.value(u).data()[2] <= 1e-6 {
                    build_failed = true;
                    break;
                }
                let px = match project_tape(&mut tape, u, &intrinsics[obs.frame]) {
                    Ok(p) => p,
                    Err(_) => {
                        build_failed = true;
                        break;
                    }
                };
                let target = tape.constant(Tensor::vector(vec![obs.pixel.x, obs.pixel.y]));
                let diff = tape.sub(px, target).map_err(to_solver)?;
                let r_obs = tape.scale(diff, obs.weight);
                residual_parts.push(r_obs);

                let jp = projection_jacobian_tape(&mut tape, u, &intrinsics[obs.frame])
                    .map_err(to_solver)?;
                // Point block: w · Jπ · R.
                let jr = tape.matmul(jp, r_n).map_err(to_solver)?;
                let dpt = tape.scale(jr, obs.weight);
                blocks.push((dpt, row, 6 * (n - 1) + 3 * ti));
                // Pose block for non-gauge frames: w · Jπ · [I | -u^].
                if obs.frame > 0 {
                    let sk = tape.skew3(u).map_err(to_solver)?;
                    let nsk = tape.neg(sk);
                    let pose_block = tape.concat_cols(&[eye3, nsk]).map_err(to_solver)?;
                    let jpp = tape.matmul(jp, pose_block).map_err(to_solver)?;
                    let dp = tape.scale(jpp, obs.weight);
                    blocks.push((dp, row, 6 * (obs.frame - 1)));
                }
                row += 2;
            }
            if build_failed {
                break;
            }
        }
        if build_failed {
            // A point wandered behind a camera; keep the best state so far.
            break;
        }
        let r_vec = tape.concat_vecs(&residual_parts).map_err(to_solver)?;
        let res_norm = tape
            .value(r_vec)
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !res_norm.is_finite() {
            break;
        }
        if let Some(prev) = prev_norm {
            if res_norm < prev {
                beta /= 3.5;
            } else {
                beta *= 1.5;
            }
        }
        prev_norm = Some(res_norm);

        let j = tape.assemble(2 * n_obs, unknowns, &blocks).map_err(to_solver)?;
        let jt = tape.transpose(j).map_err(to_solver)?;
        let h = tape.matmul(jt, j).map_err(to_solver)?;
        let r_col = tape.reshape(r_vec, vec![2 * n_obs, 1]).map_err(to_solver)?;
        let g_col = tape.matmul(jt, r_col).map_err(to_solver)?;
        let g = tape.reshape(g_col, vec![unknowns]).map_err(to_solver)?;
        let dvec = tape.diag_part(h).map_err(to_solver)?;
        let dmat = tape.diag_mat(dvec).map_err(to_solver)?;
        let damp = tape.scale(dmat, beta);
        let hd = tape.add(h, damp).map_err(to_solver)?;
        let dd = tape.diag_part(hd).map_err(to_solver)?;
        if tape.value(dd).data().iter().any(|&x| x <= 0.0) {
            break;
        }
        let sdd = tape.sqrt(dd).map_err(to_solver)?;
        let sinv = tape.recip(sdd).map_err(to_solver)?;
        let hs_rows = tape.scale_rows(hd, sinv).map_err(to_solver)?;
        let hs = tape.scale_cols(hs_rows, sinv).map_err(to_solver)?;
        let gneg = tape.neg(g);
        let rhs = tape.mul(gneg, sinv).map_err(to_solver)?;
        let x_tilde = match tape.linear_solve(hs, rhs) {
            Ok(x) => x,
            Err(_) => break,
        };
        let dz = tape.mul(x_tilde, sinv).map_err(to_solver)?;

        for f in 1..n {
            let dp = tape
                .slice_vec(dz, 6 * (f - 1), 6 * f)
                .map_err(to_solver)?;
            let (r_exp, t_exp) = se3_exp_tape(&mut tape, dp).map_err(to_solver)?;
            let (r_cur, t_cur) = pose_nodes[f];
            let r_new = tape.matmul(r_exp, r_cur).map_err(to_solver)?;
            let t_col = tape.reshape(t_cur, vec![3, 1]).map_err(to_solver)?;
            let rt = tape.matmul(r_exp, t_col).map_err(to_solver)?;
            let rt_v = tape.reshape(rt, vec![3]).map_err(to_solver)?;
            let t_new = tape.add(rt_v, t_exp).map_err(to_solver)?;
            pose_nodes[f] = (r_new, t_new);
        }
        let base = 6 * (n - 1);
        for (ti, y) in point_nodes.iter_mut().enumerate() {
            let dy = tape
                .slice_vec(dz, base + 3 * ti, base + 3 * ti + 3)
                .map_err(to_solver)?;
            *y = tape.add(*y, dy).map_err(to_solver)?;
        }
    }

    Ok(pose_nodes
        .iter()
        .map(|&(r, t)| {
            Pose::new(
                crate::posesolver::mat3_from_tensor(tape.value(r)),
                vec3_from_tensor(tape.value(t)),
            )
        })
        .collect())
}

fn to_solver(e: crate::autodiff::DiffError) -> MultiviewError {
    MultiviewError::Solver(crate::posesolver::SolverError::Diff(e))
}
