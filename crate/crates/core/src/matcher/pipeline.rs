//! Tuple-level matching: joint multi-view matching in a single graph, or the
//! pairwise ablation that matches each image pair independently.

use super::config::{EdgeType, MatcherConfig};
use super::confidence::predict_confidence;
use super::extract::extract_matches;
use super::gnn::{encode_keypoints, gnn_forward, FrameNodes, MessageCounter};
use super::sinkhorn::assign_pair;
use super::weights::BoundWeights;
use super::{Match, MatchSet, MatcherError};
use crate::autodiff::{NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    Joint,
    Pairwise,
}

/// Expected GNN messages for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMessages {
    pub edge: EdgeType,
    pub messages: usize,
}

/// Message-count formulas for matching N frames of K keypoints: joint
/// matching sends NK² self messages per self layer versus 2PK² for the
/// P = N(N-1)/2 individual pairs; cross layers send N(N-1)K² either way.
pub fn count_messages(
    n: usize,
    k: usize,
    schedule: &[EdgeType],
    mode: MatchMode,
) -> Vec<LayerMessages> {
    let pairs = n * (n - 1) / 2;
    schedule
        .iter()
        .map(|&edge| {
            let messages = match (edge, mode) {
                (EdgeType::SelfEdges, MatchMode::Joint) => n * k * k,
                (EdgeType::SelfEdges, MatchMode::Pairwise) => 2 * pairs * k * k,
                (EdgeType::CrossEdges, _) => n * (n - 1) * k * k,
            };
            LayerMessages { edge, messages }
        })
        .collect()
}

/// Assignment results for one image pair, with tape handles kept alive for
/// loss construction.
pub struct PairAssignment {
    pub a: usize,
    pub b: usize,
    pub log_p: NodeId,
    pub p: NodeId,
    /// Extracted mutual matches: (index in a, index in b, assignment score).
    pub matches: Vec<(usize, usize, f64)>,
    /// `[M]` confidence vector node; `None` when no match survived.
    pub weights_node: Option<NodeId>,
}

pub struct TupleMatches {
    pub pairs: Vec<PairAssignment>,
    pub counter: MessageCounter,
}

impl TupleMatches {
    /// Materializes a plain `MatchSet`, optionally dropping matches whose
    /// confidence falls below a threshold.
    pub fn to_match_set(&self, tape: &Tape, conf_threshold: Option<f64>) -> MatchSet {
        let mut out = MatchSet::default();
        for pair in &self.pairs {
            let weights: Vec<f64> = match pair.weights_node {
                Some(id) => tape.value(id).data().to_vec(),
                None => continue,
            };
            for (m, &(i, j, score)) in pair.matches.iter().enumerate() {
                let w = weights[m];
                if conf_threshold.is_none_or(|t| w >= t) {
                    out.matches.push(Match {
                        frame_a: pair.a,
                        idx_a: i,
                        frame_b: pair.b,
                        idx_b: j,
                        weight: w,
                        score,
                    });
                }
            }
        }
        out
    }
}

fn assign_and_score(
    tape: &mut Tape,
    a: usize,
    b: usize,
    f_a: NodeId,
    f_b: NodeId,
    bound: &BoundWeights,
    config: &MatcherConfig,
) -> Result<PairAssignment, MatcherError> {
    let bin = bound.get("dustbin");
    let (log_p, p) = assign_pair(tape, f_a, f_b, bin, config.sinkhorn_iterations)?;
    let matches = extract_matches(tape.value(p));
    let weights_node = if matches.is_empty() {
        None
    } else {
        let idx: Vec<(usize, usize)> = matches.iter().map(|&(i, j, _)| (i, j)).collect();
        Some(predict_confidence(tape, f_a, f_b, p, &idx, bound)?)
    };
    Ok(PairAssignment {
        a,
        b,
        log_p,
        p,
        matches,
        weights_node,
    })
}

/// Matches every distinct image pair of an N-frame tuple. Joint mode runs
/// one forward pass spanning all frames; pairwise mode runs the network per
/// pair.
pub fn match_tuple(
    tape: &mut Tape,
    frames: &[FrameNodes],
    bound: &BoundWeights,
    config: &MatcherConfig,
    mode: MatchMode,
) -> Result<TupleMatches, MatcherError> {
    if frames.len() < 2 {
        return Err(MatcherError::SingleFrame);
    }
    let n = frames.len();
    let mut counter = MessageCounter::default();
    let mut pairs = Vec::new();
    match mode {
        MatchMode::Joint => {
            let mut embeddings = Vec::with_capacity(n);
            for frame in frames {
                embeddings.push(encode_keypoints(tape, frame, bound, config)?);
            }
            let final_desc = gnn_forward(tape, &embeddings, bound, config, &mut counter)?;
            for a in 0..n {
                for b in a + 1..n {
                    pairs.push(assign_and_score(
                        tape,
                        a,
                        b,
                        final_desc[a],
                        final_desc[b],
                        bound,
                        config,
                    )?);
                }
            }
        }
        MatchMode::Pairwise => {
            for a in 0..n {
                for b in a + 1..n {
                    let ea = encode_keypoints(tape, &frames[a], bound, config)?;
                    let eb = encode_keypoints(tape, &frames[b], bound, config)?;
                    let final_desc =
                        gnn_forward(tape, &[ea, eb], bound, config, &mut counter)?;
                    pairs.push(assign_and_score(
                        tape,
                        a,
                        b,
                        final_desc[0],
                        final_desc[1],
                        bound,
                        config,
                    )?);
                }
            }
        }
    }
    Ok(TupleMatches { pairs, counter })
}
