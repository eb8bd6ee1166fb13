//! Keypoint encoder and the attentional message-passing network.

use super::config::{EdgeType, MatcherConfig};
use super::weights::BoundWeights;
use super::{KeypointSet, MatcherError};
use crate::autodiff::{NodeId, Tape, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Tape handles for one frame's inputs.
#[derive(Clone, Copy, Debug)]
pub struct FrameNodes {
    /// K×3 constant: normalized x, normalized y, detection confidence.
    pub coords_conf: NodeId,
    /// K×D descriptors; a var when descriptor gradients are wanted.
    pub descriptors: NodeId,
    pub num_keypoints: usize,
}

impl FrameNodes {
    /// Builds constant input nodes from a keypoint set. Coordinates are
    /// normalized to [-1, 1] by the image size before encoding.
    pub fn from_keypoints(
        tape: &mut Tape,
        kp: &KeypointSet,
        image_size: (f64, f64),
        descriptors_trainable: bool,
    ) -> Result<Self, MatcherError> {
        if kp.is_empty() {
            return Err(MatcherError::EmptyFrame);
        }
        let k = kp.len();
        let (w, h) = image_size;
        let mut cc = Tensor::zeros(vec![k, 3]);
        for (i, c) in kp.coords.iter().enumerate() {
            cc.set(i, 0, 2.0 * c[0] / w - 1.0);
            cc.set(i, 1, 2.0 * c[1] / h - 1.0);
            cc.set(i, 2, kp.confidences[i]);
        }
        let d = kp.descriptors[0].len();
        let mut desc = Tensor::zeros(vec![k, d]);
        for (i, row) in kp.descriptors.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                desc.set(i, j, x);
            }
        }
        let coords_conf = tape.constant(cc);
        let descriptors = if descriptors_trainable {
            tape.var(desc)
        } else {
            tape.constant(desc)
        };
        Ok(FrameNodes {
            coords_conf,
            descriptors,
            num_keypoints: k,
        })
    }
}

/// Counts attention messages (query × source products) per GNN layer.
#[derive(Clone, Debug, Default)]
pub struct MessageCounter {
    /// One entry per layer: edge type and accumulated message count.
    pub per_layer: Vec<(EdgeType, usize)>,
}

impl MessageCounter {
    fn record(&mut self, layer: usize, edge: EdgeType, count: usize) {
        if self.per_layer.len() <= layer {
            self.per_layer.resize(layer + 1, (edge, 0));
        }
        self.per_layer[layer].0 = edge;
        self.per_layer[layer].1 += count;
    }

    pub fn merge(&mut self, other: &MessageCounter) {
        for (layer, &(edge, count)) in other.per_layer.iter().enumerate() {
            self.record(layer, edge, count);
        }
    }

    pub fn total_self(&self) -> usize {
        self.per_layer
            .iter()
            .filter(|(e, _)| *e == EdgeType::SelfEdges)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn total_cross(&self) -> usize {
        self.per_layer
            .iter()
            .filter(|(e, _)| *e == EdgeType::CrossEdges)
            .map(|(_, c)| c)
            .sum()
    }
}

/// Per-sample feature normalization with learned affine parameters, the
/// desk-scale stand-in for batch normalization.
pub fn feature_norm(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId, MatcherError> {
    let c = tape.value(x).cols();
    let row_sum = tape.sum_rows(x)?;
    let mean = tape.scale(row_sum, 1.0 / c as f64);
    let neg_mean = tape.neg(mean);
    let centered = tape.add_col_vec(x, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var_sum = tape.sum_rows(sq)?;
    let var = tape.scale(var_sum, 1.0 / c as f64);
    let var_eps = tape.add_const(var, NORM_EPS);
    let std = tape.sqrt(var_eps)?;
    let inv_std = tape.recip(std)?;
    let normed = tape.scale_rows(centered, inv_std)?;
    let scaled = tape.scale_cols(normed, gamma)?;
    Ok(tape.add_row_vec(scaled, beta)?)
}

fn mlp_layer(
    tape: &mut Tape,
    x: NodeId,
    w: &BoundWeights,
    prefix: &str,
    with_norm_relu: bool,
) -> Result<NodeId, MatcherError> {
    let y = tape.linear(x, w.get(&format!("{prefix}.w")), w.get(&format!("{prefix}.b")))?;
    if with_norm_relu {
        let n = feature_norm(
            tape,
            y,
            w.get(&format!("{prefix}.gamma")),
            w.get(&format!("{prefix}.beta")),
        )?;
        Ok(tape.relu(n))
    } else {
        Ok(y)
    }
}

/// Initial node embedding: descriptors plus the encoded image point and
/// confidence.
pub fn encode_keypoints(
    tape: &mut Tape,
    frame: &FrameNodes,
    w: &BoundWeights,
    config: &MatcherConfig,
) -> Result<NodeId, MatcherError> {
    let d = config.descriptor_dim;
    if tape.value(frame.descriptors).cols() != d {
        return Err(MatcherError::Config(format!(
            "descriptor width {} does not match configured D={d}",
            tape.value(frame.descriptors).cols()
        )));
    }
    let widths = config.encoder_widths();
    let mut h = frame.coords_conf;
    for (i, _) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        h = mlp_layer(tape, h, w, &format!("encoder.{i}"), !last)?;
    }
    Ok(tape.add(frame.descriptors, h)?)
}

/// Multi-head dot-product attention from `queries` (Kq×D) against `sources`
/// (Ks×D); returns the aggregated Kq×D message.
fn attention(
    tape: &mut Tape,
    queries: NodeId,
    sources: NodeId,
    w: &BoundWeights,
    layer: usize,
    heads: usize,
) -> Result<NodeId, MatcherError> {
    let q = tape.linear(
        queries,
        w.get(&format!("gnn.{layer}.q.w")),
        w.get(&format!("gnn.{layer}.q.b")),
    )?;
    let k = tape.linear(
        sources,
        w.get(&format!("gnn.{layer}.k.w")),
        w.get(&format!("gnn.{layer}.k.b")),
    )?;
    let v = tape.linear(
        sources,
        w.get(&format!("gnn.{layer}.v.w")),
        w.get(&format!("gnn.{layer}.v.b")),
    )?;
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_msgs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let (lo, hi) = (hh * dh, (hh + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kht = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kht)?;
        let logits = tape.scale(logits, scale);
        let alpha = tape.softmax_rows(logits)?;
        head_msgs.push(tape.matmul(alpha, vh)?);
    }
    Ok(tape.concat_cols(&head_msgs)?)
}

/// Runs the alternating self/cross message-passing schedule over all frames
/// and returns the final projected node descriptors, one K×D node per frame.
pub fn gnn_forward(
    tape: &mut Tape,
    embeddings: &[NodeId],
    w: &BoundWeights,
    config: &MatcherConfig,
    counter: &mut MessageCounter,
) -> Result<Vec<NodeId>, MatcherError> {
    if embeddings.len() < 2 {
        return Err(MatcherError::SingleFrame);
    }
    let mut f: Vec<NodeId> = embeddings.to_vec();
    for (layer, edge) in config.schedule.iter().enumerate() {
        // All messages are computed from the pre-update state.
        let mut messages = Vec::with_capacity(f.len());
        for n in 0..f.len() {
            let sources = match edge {
                EdgeType::SelfEdges => f[n],
                EdgeType::CrossEdges => {
                    let others: Vec<NodeId> = (0..f.len())
                        .filter(|&m| m != n)
                        .map(|m| f[m])
                        .collect();
                    if others.len() == 1 {
                        others[0]
                    } else {
                        tape.concat_rows(&others)?
                    }
                }
            };
            let nq = tape.value(f[n]).rows();
            let ns = tape.value(sources).rows();
            counter.record(layer, *edge, nq * ns);
            messages.push(attention(tape, f[n], sources, w, layer, config.heads)?);
        }
        for n in 0..f.len() {
            let joint = tape.concat_cols(&[f[n], messages[n]])?;
            let h = mlp_layer(tape, joint, w, &format!("gnn.{layer}.update.0"), true)?;
            let upd = mlp_layer(tape, h, w, &format!("gnn.{layer}.update.1"), false)?;
            f[n] = tape.add(f[n], upd)?;
        }
    }
    let mut out = Vec::with_capacity(f.len());
    for fn_id in f {
        out.push(tape.linear(fn_id, w.get("final.w"), w.get("final.b"))?);
    }
    Ok(out)
}
