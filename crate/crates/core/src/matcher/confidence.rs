//! Confidence head: predicts a weight in (0,1) for each extracted match from
//! the two node descriptors and the assignment score.

use super::gnn::feature_norm;
use super::weights::BoundWeights;
use super::MatcherError;
use crate::autodiff::{NodeId, Tape};

fn norm_relu_layer(
    tape: &mut Tape,
    x: NodeId,
    w: &BoundWeights,
    prefix: &str,
) -> Result<NodeId, MatcherError> {
    let y = tape.linear(x, w.get(&format!("{prefix}.w")), w.get(&format!("{prefix}.b")))?;
    let n = feature_norm(
        tape,
        y,
        w.get(&format!("{prefix}.gamma")),
        w.get(&format!("{prefix}.beta")),
    )?;
    Ok(tape.relu(n))
}

/// Predicts confidences for a list of matches in one pass. `f_a`, `f_b` are
/// the final node descriptors (K×D), `p` the assignment matrix in
/// probability domain. Returns an `[M]` vector node.
pub fn predict_confidence(
    tape: &mut Tape,
    f_a: NodeId,
    f_b: NodeId,
    p: NodeId,
    matches: &[(usize, usize)],
    w: &BoundWeights,
) -> Result<NodeId, MatcherError> {
    assert!(!matches.is_empty(), "no matches to score");
    let rows_a: Vec<usize> = matches.iter().map(|&(i, _)| i).collect();
    let rows_b: Vec<usize> = matches.iter().map(|&(_, j)| j).collect();
    let fa = tape.gather_rows(f_a, &rows_a)?;
    let fb = tape.gather_rows(f_b, &rows_b)?;
    let joint = tape.concat_cols(&[fa, fb])?;
    let h3 = norm_relu_layer(tape, joint, w, "conf3.0")?;
    let h3 = norm_relu_layer(tape, h3, w, "conf3.1")?;

    let m = matches.len();
    let p_vals = tape.gather_entries(p, matches)?;
    let p_col = tape.reshape(p_vals, vec![m, 1])?;
    let h2 = norm_relu_layer(tape, p_col, w, "conf2.0")?;
    let h2 = norm_relu_layer(tape, h2, w, "conf2.1")?;

    let merged = tape.add(h2, h3)?;
    let logits = tape.linear(merged, w.get("conf1.w"), w.get("conf1.b"))?;
    let sig = tape.sigmoid(logits);
    Ok(tape.reshape(sig, vec![m])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_at, Tensor};
    use crate::matcher::{MatcherConfig, MatcherWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_strictly_inside_unit_interval() {
        let cfg = MatcherConfig::toy();
        let weights = MatcherWeights::init(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = cfg.descriptor_dim;
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let fa = tape.constant(Tensor::new(
            vec![5, d],
            (0..5 * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        ));
        let fb = tape.constant(Tensor::new(
            vec![6, d],
            (0..6 * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        ));
        let p = tape.constant(Tensor::new(
            vec![6, 7],
            (0..42).map(|_| rng.random_range(0.0..1.0)).collect(),
        ));
        let matches = vec![(0, 1), (2, 4), (4, 0)];
        let wvec = predict_confidence(&mut tape, fa, fb, p, &matches, &bound).unwrap();
        for &x in tape.value(wvec).data() {
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn gradient_wrt_node_descriptors() {
        let cfg = MatcherConfig::micro();
        let weights = MatcherWeights::init(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = cfg.descriptor_dim;
        let fa0 = Tensor::new(
            vec![3, d],
            (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let fb0 = Tensor::new(
            vec![3, d],
            (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let p0 = Tensor::new(
            vec![4, 4],
            (0..16).map(|_| rng.random_range(0.1..0.9)).collect(),
        );
        let matches = vec![(0, 2), (1, 0)];
        let coords: Vec<usize> = (0..3 * d).collect();
        let err = gradcheck_at(
            |tape, fa| {
                let bound = weights.bind(tape, false);
                let fb = tape.constant(fb0.clone());
                let p = tape.constant(p0.clone());
                let wv = predict_confidence(tape, fa, fb, p, &matches, &bound)
                    .map_err(|e| match e {
                        crate::matcher::MatcherError::Diff(d) => d,
                        other => panic!("{other}"),
                    })?;
                Ok(tape.sum_all(wv))
            },
            &fa0,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "confidence gradient error {err}");
    }
}
