use serde::{Deserialize, Serialize};

use super::MatcherError;

/// Which edges a GNN layer exchanges messages along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeType {
    SelfEdges,
    CrossEdges,
}

/// Architecture constants for the matching network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Descriptor and node-embedding width D.
    pub descriptor_dim: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Layer schedule; must start with a self-edge exchange.
    pub schedule: Vec<EdgeType>,
    /// Sinkhorn iterations for the partial assignment.
    pub sinkhorn_iterations: usize,
}

impl MatcherConfig {
    /// Full-scale multi-view network: 7 self-attention layers, each followed
    /// by three cross-attention layers.
    pub fn multi_view(descriptor_dim: usize) -> Self {
        let mut schedule = Vec::new();
        for _ in 0..7 {
            schedule.push(EdgeType::SelfEdges);
            schedule.extend([EdgeType::CrossEdges; 3]);
        }
        MatcherConfig {
            descriptor_dim,
            heads: 4,
            schedule,
            sinkhorn_iterations: 100,
        }
    }

    /// Full-scale two-view network: 9 self- and 9 cross-attention layers in
    /// alternating fashion.
    pub fn two_view(descriptor_dim: usize) -> Self {
        let mut schedule = Vec::new();
        for _ in 0..9 {
            schedule.push(EdgeType::SelfEdges);
            schedule.push(EdgeType::CrossEdges);
        }
        MatcherConfig {
            descriptor_dim,
            heads: 4,
            schedule,
            sinkhorn_iterations: 100,
        }
    }

    /// Desk-scale profile: D=32, two self/cross rounds, 30 Sinkhorn
    /// iterations.
    pub fn toy() -> Self {
        MatcherConfig {
            descriptor_dim: 32,
            heads: 4,
            schedule: vec![
                EdgeType::SelfEdges,
                EdgeType::CrossEdges,
                EdgeType::SelfEdges,
                EdgeType::CrossEdges,
            ],
            sinkhorn_iterations: 30,
        }
    }

    /// Micro profile for finite-difference checks.
    pub fn micro() -> Self {
        MatcherConfig {
            descriptor_dim: 8,
            heads: 4,
            schedule: vec![EdgeType::SelfEdges, EdgeType::CrossEdges],
            sinkhorn_iterations: 20,
        }
    }

    /// Encoder MLP widths from input `[x ‖ c]` (3 channels) to D.
    pub fn encoder_widths(&self) -> Vec<usize> {
        vec![32, 64, 128, 256, self.descriptor_dim]
    }

    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.descriptor_dim == 0 || self.descriptor_dim % self.heads != 0 {
            return Err(MatcherError::Config(format!(
                "descriptor dim {} must be a positive multiple of {} heads",
                self.descriptor_dim, self.heads
            )));
        }
        if self.schedule.is_empty() || self.schedule[0] != EdgeType::SelfEdges {
            return Err(MatcherError::Config(
                "layer schedule must start with a self-edge exchange".into(),
            ));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(MatcherError::Config(
                "sinkhorn needs at least one iteration".into(),
            ));
        }
        Ok(())
    }
}
