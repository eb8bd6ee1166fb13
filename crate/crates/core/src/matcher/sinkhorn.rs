//! Log-domain Sinkhorn iteration for the dustbin-augmented partial
//! assignment.

use super::MatcherError;
use crate::autodiff::{NodeId, Tape, Tensor};

/// Runs `iters` Sinkhorn iterations on the (Kₐ+1)×(K_b+1) augmented score
/// matrix with marginals `(1,…,1,K_b)` / `(1,…,1,Kₐ)` and returns the
/// log-assignment matrix.
pub fn log_sinkhorn(
    tape: &mut Tape,
    scores: NodeId,
    bin: NodeId,
    iters: usize,
) -> Result<NodeId, MatcherError> {
    if iters == 0 {
        return Err(MatcherError::Config("sinkhorn iters must be >= 1".into()));
    }
    let (ka, kb) = {
        let s = tape.value(scores);
        (s.rows(), s.cols())
    };
    // Augmented matrix: scores in the interior, the dustbin score along the
    // last row/column.
    let ones_row = tape.constant(Tensor::filled(vec![1, kb], 1.0));
    let ones_col = tape.constant(Tensor::filled(vec![ka, 1], 1.0));
    let ones_corner = tape.constant(Tensor::filled(vec![1, 1], 1.0));
    let bin_row = tape.scale_t(ones_row, bin)?;
    let bin_col = tape.scale_t(ones_col, bin)?;
    let bin_corner = tape.scale_t(ones_corner, bin)?;
    let z = tape.assemble(
        ka + 1,
        kb + 1,
        &[
            (scores, 0, 0),
            (bin_col, 0, kb),
            (bin_row, ka, 0),
            (bin_corner, ka, kb),
        ],
    )?;

    let mut log_a = vec![0.0; ka + 1];
    log_a[ka] = (kb as f64).ln();
    let mut log_b = vec![0.0; kb + 1];
    log_b[kb] = (ka as f64).ln();
    let log_a = tape.constant(Tensor::vector(log_a));
    let log_b = tape.constant(Tensor::vector(log_b));

    let mut u = tape.constant(Tensor::zeros(vec![ka + 1]));
    let mut v = tape.constant(Tensor::zeros(vec![kb + 1]));
    for _ in 0..iters {
        let zv = tape.add_row_vec(z, v)?;
        let lse_rows = tape.logsumexp_rows(zv)?;
        u = tape.sub(log_a, lse_rows)?;
        let zu = tape.add_col_vec(z, u)?;
        let lse_cols = tape.logsumexp_cols(zu)?;
        v = tape.sub(log_b, lse_cols)?;
    }
    let zu = tape.add_col_vec(z, u)?;
    Ok(tape.add_row_vec(zu, v)?)
}

/// Dot-product scores between two frames' node descriptors followed by the
/// Sinkhorn assignment. Returns `(log_p, p)`.
pub fn assign_pair(
    tape: &mut Tape,
    f_a: NodeId,
    f_b: NodeId,
    bin: NodeId,
    iters: usize,
) -> Result<(NodeId, NodeId), MatcherError> {
    let f_b_t = tape.transpose(f_b)?;
    let scores = tape.matmul(f_a, f_b_t)?;
    let log_p = log_sinkhorn(tape, scores, bin, iters)?;
    let p = tape.exp(log_p)?;
    Ok((log_p, p))
}
