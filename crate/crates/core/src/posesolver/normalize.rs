//! Hartley input coordinate normalization: centroid at the origin, mean
//! distance √2.

use nalgebra::{Matrix3, Vector2};

use super::SolverError;
use crate::autodiff::{NodeId, Tape, Tensor};

const MIN_SPREAD: f64 = 1e-12;
const ROOT2: f64 = std::f64::consts::SQRT_2;

/// Plain similarity normalization. Returns the normalized points and the
/// 3×3 transform `T` with `x̂ = T x` (homogeneous); the denormalization of a
/// fundamental matrix estimated on normalized coordinates is `T'ᵀ F̂ T`.
pub fn normalize_points(
    points: &[Vector2<f64>],
) -> Result<(Vec<Vector2<f64>>, Matrix3<f64>), SolverError> {
    if points.len() < 2 {
        return Err(SolverError::TooFewMatches {
            got: points.len(),
            need: 2,
        });
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < MIN_SPREAD {
        return Err(SolverError::Degenerate(
            "all points coincide; cannot normalize".into(),
        ));
    }
    let s = ROOT2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0);
    let normed = points.iter().map(|p| (p - centroid) * s).collect();
    Ok((normed, t))
}

/// Tape version of [`normalize_points`] over an M×2 coordinate node.
/// Returns the normalized M×2 node and the 3×3 transform node.
pub fn normalize_points_tape(
    tape: &mut Tape,
    points: NodeId,
) -> Result<(NodeId, NodeId), SolverError> {
    let m = tape.value(points).rows();
    if m < 2 {
        return Err(SolverError::TooFewMatches { got: m, need: 2 });
    }
    let col_sum = tape.sum_cols(points)?;
    let centroid = tape.scale(col_sum, 1.0 / m as f64);
    let neg_centroid = tape.neg(centroid);
    let centered = tape.add_row_vec(points, neg_centroid)?;
    let sq = tape.mul(centered, centered)?;
    let row_sq = tape.sum_rows(sq)?;
    let dist = tape.sqrt(row_sq)?;
    let dist_sum = tape.sum_all(dist);
    let mean_dist = tape.scale(dist_sum, 1.0 / m as f64);
    if tape.value(mean_dist).item() < MIN_SPREAD {
        return Err(SolverError::Degenerate(
            "all points coincide; cannot normalize".into(),
        ));
    }
    let inv_mean = tape.recip(mean_dist)?;
    let s = tape.scale(inv_mean, ROOT2);
    let normed = tape.scale_t(centered, s)?;

    // T = [[s, 0, -s·cx], [0, s, -s·cy], [0, 0, 1]].
    let cx = tape.slice_vec(centroid, 0, 1)?;
    let cy = tape.slice_vec(centroid, 1, 2)?;
    let scx = tape.mul(s, cx)?;
    let neg_scx = tape.neg(scx);
    let scy = tape.mul(s, cy)?;
    let neg_scy = tape.neg(scy);
    let s_m = tape.reshape(s, vec![1, 1])?;
    let nscx_m = tape.reshape(neg_scx, vec![1, 1])?;
    let nscy_m = tape.reshape(neg_scy, vec![1, 1])?;
    let one = tape.constant(Tensor::matrix(1, 1, vec![1.0]));
    let t = tape.assemble(
        3,
        3,
        &[
            (s_m, 0, 0),
            (nscx_m, 0, 2),
            (s_m, 1, 1),
            (nscy_m, 1, 2),
            (one, 2, 2),
        ],
    )?;
    Ok((normed, t))
}

/// Confidence-weighted Hartley normalization: centroid and mean distance are
/// weighted by `w`, so zero-weight matches drop out of the transform exactly
/// and uniform weight scaling cancels.
pub fn normalize_points_weighted_tape(
    tape: &mut Tape,
    points: NodeId,
    w: NodeId,
) -> Result<(NodeId, NodeId), SolverError> {
    let m = tape.value(points).rows();
    if m < 2 {
        return Err(SolverError::TooFewMatches { got: m, need: 2 });
    }
    let w_sum = tape.sum_all(w);
    if tape.value(w_sum).item() <= 0.0 {
        return Err(SolverError::Degenerate("all weights vanish".into()));
    }
    let inv_w_sum = tape.recip(w_sum)?;
    let wx = tape.scale_rows(points, w)?;
    let col_sum = tape.sum_cols(wx)?;
    let centroid = tape.scale_t(col_sum, inv_w_sum)?;
    let neg_centroid = tape.neg(centroid);
    let centered = tape.add_row_vec(points, neg_centroid)?;
    let sq = tape.mul(centered, centered)?;
    let row_sq = tape.sum_rows(sq)?;
    let dist = tape.sqrt(row_sq)?;
    let wdist = tape.mul(dist, w)?;
    let wdist_sum = tape.sum_all(wdist);
    let mean_dist = tape.scale_t(wdist_sum, inv_w_sum)?;
    if tape.value(mean_dist).item() < MIN_SPREAD {
        return Err(SolverError::Degenerate(
            "weighted points coincide; cannot normalize".into(),
        ));
    }
    let inv_mean = tape.recip(mean_dist)?;
    let s = tape.scale(inv_mean, ROOT2);
    let normed = tape.scale_t(centered, s)?;

    let cx = tape.slice_vec(centroid, 0, 1)?;
    let cy = tape.slice_vec(centroid, 1, 2)?;
    let scx = tape.mul(s, cx)?;
    let neg_scx = tape.neg(scx);
    let scy = tape.mul(s, cy)?;
    let neg_scy = tape.neg(scy);
    let s_m = tape.reshape(s, vec![1, 1])?;
    let nscx_m = tape.reshape(neg_scx, vec![1, 1])?;
    let nscy_m = tape.reshape(neg_scy, vec![1, 1])?;
    let one = tape.constant(Tensor::matrix(1, 1, vec![1.0]));
    let t = tape.assemble(
        3,
        3,
        &[
            (s_m, 0, 0),
            (nscx_m, 0, 2),
            (s_m, 1, 1),
            (nscy_m, 1, 2),
            (one, 2, 2),
        ],
    )?;
    Ok((normed, t))
}
