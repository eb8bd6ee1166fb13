//! Match graph over a tuple: pairwise relative-pose edges with inlier
//! counts, and the maximum spanning tree used to initialize absolute poses.

use super::MultiviewError;
use crate::geometry::{Pose, RelativePose};

/// One estimated relative pose between frames `a < b` of a tuple.
#[derive(Clone, Debug)]
pub struct PoseGraphEdge {
    pub a: usize,
    pub b: usize,
    pub pose: RelativePose,
    /// Matches within the epipolar inlier threshold under the estimate.
    pub inliers: usize,
    /// Match coordinates and confidences retained for global refinement.
    pub matches: crate::posesolver::WeightedMatches,
    pub inlier_mask: Vec<bool>,
    /// Keypoint indices of the matches in frames a and b.
    pub indices: Vec<(usize, usize)>,
}

/// Frames, surviving edges and absolute pose estimates (frame 0 fixed).
#[derive(Clone, Debug)]
pub struct PoseGraph {
    pub n_frames: usize,
    pub edges: Vec<PoseGraphEdge>,
    pub absolute: Vec<Pose>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Maximum-weight spanning tree by inlier count (ties break lexicographically
/// by the edge's frame pair), plus absolute poses composed from frame 0.
/// Fails listing the components when the edge set does not connect the
/// frames.
pub fn max_spanning_tree(
    n_frames: usize,
    edges: &[PoseGraphEdge],
) -> Result<(Vec<usize>, Vec<Pose>), MultiviewError> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| {
        edges[j]
            .inliers
            .cmp(&edges[i].inliers)
            .then_with(|| (edges[i].a, edges[i].b).cmp(&(edges[j].a, edges[j].b)))
    });
    let mut uf = UnionFind::new(n_frames);
    let mut tree = Vec::with_capacity(n_frames.saturating_sub(1));
    for idx in order {
        if uf.union(edges[idx].a, edges[idx].b) {
            tree.push(idx);
        }
    }
    if tree.len() + 1 != n_frames {
        let mut components: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for f in 0..n_frames {
            let root = uf.find(f);
            components.entry(root).or_default().push(f);
        }
        return Err(MultiviewError::Disconnected {
            components: components.into_values().collect(),
        });
    }
    // Absolute poses by breadth-first composition from frame 0.
    let mut absolute = vec![None::<Pose>; n_frames];
    absolute[0] = Some(Pose::identity());
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(f) = queue.pop_front() {
        let t_f = absolute[f].unwrap();
        for &idx in &tree {
            let e = &edges[idx];
            if e.a == f && absolute[e.b].is_none() {
                absolute[e.b] = Some(e.pose.pose.compose(&t_f));
                queue.push_back(e.b);
            } else if e.b == f && absolute[e.a].is_none() {
                absolute[e.a] = Some(e.pose.pose.inverse().compose(&t_f));
                queue.push_back(e.a);
            }
        }
    }
    tree.sort_unstable();
    Ok((tree, absolute.into_iter().map(Option::unwrap).collect()))
}
