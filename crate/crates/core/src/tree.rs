//! Binary tree topologies in heap numbering (root = 1, children of `j` are
//! `2j` and `2j + 1`), the depth-dependent structure prior, and the
//! grow/prune/stay proposal used for global exploration.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::data::Task;

/// Deepest node depth supported by the `u32` heap numbering.
pub const MAX_SUPPORTED_DEPTH: u32 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("node {node} has no internal parent")]
    Orphan { node: u32 },
    #[error("node index 0 is not a valid heap index")]
    ZeroIndex,
    #[error("node {node} exceeds the supported depth {max}")]
    TooDeep { node: u32, max: u32 },
    #[error("malformed tree key {0:?}")]
    BadKey(String),
    #[error("invalid structure hyperparameter {name} = {value}")]
    Hyper { name: &'static str, value: f64 },
}

#[inline]
pub fn depth_of(node: u32) -> u32 {
    31 - node.leading_zeros()
}

/// An immutable binary tree topology identified by its set of internal nodes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeTopology {
    internal: Vec<u32>,
    leaves: Vec<u32>,
}

impl TreeTopology {
    pub fn root_only() -> Self {
        Self {
            internal: Vec::new(),
            leaves: vec![1],
        }
    }

    pub fn from_internal<I: IntoIterator<Item = u32>>(nodes: I) -> Result<Self, TreeError> {
        let set: BTreeSet<u32> = nodes.into_iter().collect();
        for &n in &set {
            if n == 0 {
                return Err(TreeError::ZeroIndex);
            }
            if depth_of(n) >= MAX_SUPPORTED_DEPTH {
                return Err(TreeError::TooDeep {
                    node: n,
                    max: MAX_SUPPORTED_DEPTH,
                });
            }
            if n != 1 && !set.contains(&(n / 2)) {
                return Err(TreeError::Orphan { node: n });
            }
        }
        let internal: Vec<u32> = set.into_iter().collect();
        let leaves = if internal.is_empty() {
            vec![1]
        } else {
            let mut out = Vec::with_capacity(internal.len() + 1);
            collect_leaves(&internal, 1, &mut out);
            out
        };
        Ok(Self { internal, leaves })
    }

    /// Parses a canonical key (`"1,2,5"`; the empty string is the root-only tree).
    pub fn from_key(key: &str) -> Result<Self, TreeError> {
        let key = key.trim();
        if key.is_empty() {
            return Ok(Self::root_only());
        }
        let nodes = key
            .split(',')
            .map(|s| s.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| TreeError::BadKey(key.to_string()))?;
        Self::from_internal(nodes)
    }

    /// Internal nodes in ascending heap order.
    pub fn internal(&self) -> &[u32] {
        &self.internal
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> &[u32] {
        &self.leaves
    }

    pub fn n_internal(&self) -> usize {
        self.internal.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_internal(&self, node: u32) -> bool {
        self.internal.binary_search(&node).is_ok()
    }

    pub fn is_leaf(&self, node: u32) -> bool {
        self.leaves.contains(&node)
    }

    pub fn max_depth(&self) -> u32 {
        self.leaves.iter().map(|&l| depth_of(l)).max().unwrap_or(0)
    }

    /// Comma-separated sorted internal node list.
    pub fn key(&self) -> String {
        let parts: Vec<String> = self.internal.iter().map(u32::to_string).collect();
        parts.join(",")
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable(&self) -> Vec<u32> {
        self.internal
            .iter()
            .copied()
            .filter(|&n| !self.is_internal(2 * n) && !self.is_internal(2 * n + 1))
            .collect()
    }

    /// Leaves that may still be split under `max_depth`.
    pub fn growable(&self, max_depth: u32) -> Vec<u32> {
        self.leaves
            .iter()
            .copied()
            .filter(|&l| depth_of(l) < max_depth)
            .collect()
    }

    pub fn grow(&self, leaf: u32) -> Self {
        debug_assert!(self.is_leaf(leaf));
        let mut nodes = self.internal.clone();
        nodes.push(leaf);
        Self::from_internal(nodes).expect("growing a leaf keeps the tree valid")
    }

    pub fn prune(&self, node: u32) -> Self {
        let nodes = self.internal.iter().copied().filter(|&n| n != node);
        Self::from_internal(nodes).expect("pruning a prunable node keeps the tree valid")
    }
}

fn collect_leaves(internal: &[u32], node: u32, out: &mut Vec<u32>) {
    if internal.binary_search(&node).is_ok() {
        collect_leaves(internal, 2 * node, out);
        collect_leaves(internal, 2 * node + 1, out);
    } else {
        out.push(node);
    }
}

impl fmt::Debug for TreeTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tree[{}]", self.key())
    }
}

impl fmt::Display for TreeTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.internal.is_empty() {
            f.write_str("root")
        } else {
            f.write_str(&self.key())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureHyperparams {
    pub alpha_split: f64,
    pub beta_split: f64,
}

impl Default for StructureHyperparams {
    fn default() -> Self {
        Self {
            alpha_split: 0.95,
            beta_split: 1.0,
        }
    }
}

impl StructureHyperparams {
    pub fn validate(&self) -> Result<(), TreeError> {
        if !(self.alpha_split > 0.0 && self.alpha_split < 1.0) {
            return Err(TreeError::Hyper {
                name: "alpha_split",
                value: self.alpha_split,
            });
        }
        if !(self.beta_split >= 0.0 && self.beta_split.is_finite()) {
            return Err(TreeError::Hyper {
                name: "beta_split",
                value: self.beta_split,
            });
        }
        Ok(())
    }

    /// `alpha (1 + depth)^(-beta)`.
    pub fn p_split(&self, depth: u32) -> f64 {
        self.alpha_split * (1.0 + depth as f64).powf(-self.beta_split)
    }
}

/// Unnormalized log structure prior: split probability for every internal
/// node and the no-split probability for every leaf.
pub fn log_structure_prior(t: &TreeTopology, h: &StructureHyperparams) -> f64 {
    let internal: f64 = t.internal.iter().map(|&n| h.p_split(depth_of(n)).ln()).sum();
    let leaves: f64 = t
        .leaves
        .iter()
        .map(|&n| (-h.p_split(depth_of(n))).ln_1p())
        .sum();
    internal + leaves
}

/// Draws a topology from the branching-process prior, forcing nodes at
/// `max_depth` to be leaves.
pub fn sample_prior_topology<R: Rng + ?Sized>(
    h: &StructureHyperparams,
    max_depth: u32,
    rng: &mut R,
) -> TreeTopology {
    let mut internal = Vec::new();
    let mut frontier = vec![1u32];
    while let Some(node) = frontier.pop() {
        let d = depth_of(node);
        if d < max_depth && rng.random::<f64>() < h.p_split(d) {
            internal.push(node);
            frontier.push(2 * node);
            frontier.push(2 * node + 1);
        }
    }
    TreeTopology::from_internal(internal).expect("branching process yields valid trees")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Stay,
    Grow,
    Prune,
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoveKind::Stay => "stay",
            MoveKind::Grow => "grow",
            MoveKind::Prune => "prune",
        })
    }
}

/// Probabilities of the three global moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveProbs {
    pub stay: f64,
    pub grow: f64,
    pub prune: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        Self {
            stay: 0.2,
            grow: 0.4,
            prune: 0.4,
        }
    }
}

/// Grow/prune/stay proposal. An infeasible move falls back to stay.
pub fn propose_global<R: Rng + ?Sized>(
    t: &TreeTopology,
    probs: &MoveProbs,
    max_depth: u32,
    rng: &mut R,
) -> (TreeTopology, MoveKind) {
    let total = probs.stay + probs.grow + probs.prune;
    let u = rng.random::<f64>() * total;
    let kind = if u < probs.grow {
        MoveKind::Grow
    } else if u < probs.grow + probs.prune {
        MoveKind::Prune
    } else {
        MoveKind::Stay
    };
    match kind {
        MoveKind::Grow => {
            let cands = t.growable(max_depth);
            if cands.is_empty() {
                return (t.clone(), MoveKind::Stay);
            }
            let leaf = cands[rng.random_range(0..cands.len())];
            (t.grow(leaf), MoveKind::Grow)
        }
        MoveKind::Prune => {
            let cands = t.prunable();
            if cands.is_empty() {
                return (t.clone(), MoveKind::Stay);
            }
            let node = cands[rng.random_range(0..cands.len())];
            (t.prune(node), MoveKind::Prune)
        }
        MoveKind::Stay => (t.clone(), MoveKind::Stay),
    }
}

/// Every topology whose leaves are at depth `<= max_depth`.
pub fn enumerate_topologies(max_depth: u32) -> Vec<TreeTopology> {
    fn rec(frontier: &[u32], internal: &mut Vec<u32>, max_depth: u32, out: &mut Vec<TreeTopology>) {
        let Some((&node, rest)) = frontier.split_first() else {
            out.push(TreeTopology::from_internal(internal.iter().copied()).unwrap());
            return;
        };
        // node stays a leaf
        rec(rest, internal, max_depth, out);
        if depth_of(node) < max_depth {
            internal.push(node);
            let mut next = rest.to_vec();
            next.push(2 * node);
            next.push(2 * node + 1);
            rec(&next, internal, max_depth, out);
            internal.pop();
        }
    }
    let mut out = Vec::new();
    rec(&[1], &mut Vec::new(), max_depth, &mut out);
    out
}

/// Dimensions of the local parameter blocks for a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub n_simplexes: usize,
    pub simplex_len: usize,
    pub n_thresholds: usize,
    pub n_leaf_means: usize,
    pub n_sigma: usize,
}

pub fn enumerate_params_shape(t: &TreeTopology, n_x: usize, task: Task) -> ParamShape {
    let n = t.n_internal();
    let (means, sigma) = match task {
        Task::Regression => (t.n_leaves(), 1),
        Task::Classification { .. } => (0, 0),
    };
    ParamShape {
        n_simplexes: n,
        simplex_len: n_x,
        n_thresholds: n,
        n_leaf_means: means,
        n_sigma: sigma,
    }
}

/// Breadth-first reachability of all topologies up to `max_depth` under
/// single grow/prune moves, starting from the root-only tree.
pub fn reachable_from_root(max_depth: u32) -> HashSet<TreeTopology> {
    let mut seen = HashSet::new();
    let mut queue = std::collections::VecDeque::new();
    let root = TreeTopology::root_only();
    seen.insert(root.clone());
    queue.push_back(root);
    while let Some(t) = queue.pop_front() {
        let mut next: Vec<TreeTopology> =
            t.growable(max_depth).into_iter().map(|l| t.grow(l)).collect();
        next.extend(t.prunable().into_iter().map(|n| t.prune(n)));
        for n in next {
            if seen.insert(n.clone()) {
                queue.push_back(n);
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(nodes: &[u32]) -> TreeTopology {
        TreeTopology::from_internal(nodes.iter().copied()).unwrap()
    }

    #[test]
    fn structure_prior_hand_values() {
        let h = StructureHyperparams::default();
        let root = TreeTopology::root_only();
        assert!((log_structure_prior(&root, &h) - 0.05f64.ln()).abs() < 1e-14);
        let stump = t(&[1]);
        let expect = (0.95f64 * 0.525 * 0.525).ln();
        assert!((log_structure_prior(&stump, &h) - expect).abs() < 1e-14);
    }

    #[test]
    fn structure_prior_small_alpha_limit() {
        let h = StructureHyperparams {
            alpha_split: 1e-12,
            beta_split: 1.0,
        };
        assert!(log_structure_prior(&TreeTopology::root_only(), &h).abs() < 1e-11);
        assert!(log_structure_prior(&t(&[1]), &h) < -25.0);
    }

    #[test]
    fn leaves_left_to_right() {
        let wu = t(&[1, 2]);
        assert_eq!(wu.leaves(), &[4, 5, 3]);
        assert_eq!(wu.key(), "1,2");
        assert_eq!(t(&[1, 3, 6]).leaves(), &[2, 12, 13, 7]);
    }

    #[test]
    fn invalid_trees_rejected() {
        assert_eq!(
            TreeTopology::from_internal([2]),
            Err(TreeError::Orphan { node: 2 })
        );
        assert!(TreeTopology::from_internal([1, 5]).is_err());
        assert!(TreeTopology::from_internal([0]).is_err());
        assert!(TreeTopology::from_key("1,x").is_err());
    }

    #[test]
    fn key_roundtrip() {
        for tree in enumerate_topologies(3) {
            assert_eq!(TreeTopology::from_key(&tree.key()).unwrap(), tree);
        }
    }

    #[test]
    fn grow_and_prune_examples() {
        let root = TreeTopology::root_only();
        let grown = root.grow(1);
        assert_eq!(grown.internal(), &[1]);
        assert_eq!(grown.leaves(), &[2, 3]);
        assert_eq!(grown.prunable(), vec![1]);
        assert_eq!(grown.prune(1), root);
        assert!(root.prunable().is_empty());
    }

    #[test]
    fn prune_on_root_degenerates_to_stay() {
        let probs = MoveProbs {
            stay: 0.0,
            grow: 0.0,
            prune: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (next, kind) = propose_global(&TreeTopology::root_only(), &probs, 5, &mut rng);
        assert_eq!(kind, MoveKind::Stay);
        assert_eq!(next, TreeTopology::root_only());
    }

    #[test]
    fn grow_blocked_at_max_depth() {
        let probs = MoveProbs {
            stay: 0.0,
            grow: 1.0,
            prune: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = t(&[1]);
        let (next, kind) = propose_global(&full, &probs, 1, &mut rng);
        assert_eq!(kind, MoveKind::Stay);
        assert_eq!(next, full);
    }

    #[test]
    fn enumeration_counts_and_injective_keys() {
        // number of full binary trees with leaves at depth <= d: a(d) = a(d-1)^2 + 1
        let expected = [1usize, 2, 5, 26, 677];
        for (d, &n) in expected.iter().enumerate() {
            let all = enumerate_topologies(d as u32);
            assert_eq!(all.len(), n);
            let keys: HashSet<String> = all.iter().map(|t| t.key()).collect();
            assert_eq!(keys.len(), n);
        }
    }

    #[test]
    fn every_topology_reachable_to_depth_3() {
        let reach = reachable_from_root(3);
        for tree in enumerate_topologies(3) {
            assert!(reach.contains(&tree), "{tree:?} not reachable");
        }
    }

    #[test]
    fn prior_draws_respect_depth_cap() {
        let h = StructureHyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let tree = sample_prior_topology(&h, 3, &mut rng);
            assert!(tree.max_depth() <= 3);
            assert!(log_structure_prior(&tree, &h).is_finite());
        }
    }

    #[test]
    fn param_shapes() {
        let reg = Task::Regression;
        let cls = Task::Classification { n_classes: 2 };
        let s = enumerate_params_shape(&TreeTopology::root_only(), 3, reg);
        assert_eq!((s.n_simplexes, s.n_thresholds, s.n_leaf_means, s.n_sigma), (0, 0, 1, 1));
        let s = enumerate_params_shape(&t(&[1]), 3, reg);
        assert_eq!((s.n_simplexes, s.simplex_len, s.n_thresholds, s.n_leaf_means, s.n_sigma), (1, 3, 1, 2, 1));
        let s = enumerate_params_shape(&t(&[1, 2]), 2, cls);
        assert_eq!((s.n_simplexes, s.simplex_len, s.n_thresholds, s.n_leaf_means, s.n_sigma), (2, 2, 2, 0, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn grow_then_prune_restores_key(idx in 0usize..677, pick in 0usize..64) {
                let all = enumerate_topologies(4);
                let tree = &all[idx % all.len()];
                let growable = tree.growable(5);
                let leaf = growable[pick % growable.len()];
                let grown = tree.grow(leaf);
                prop_assert!(grown.prunable().contains(&leaf));
                prop_assert_eq!(grown.prune(leaf).key(), tree.key());
            }

            #[test]
            fn proposals_stay_valid(seed in any::<u64>(), idx in 0usize..677) {
                let all = enumerate_topologies(4);
                let tree = &all[idx % all.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (next, kind) = propose_global(tree, &MoveProbs::default(), 4, &mut rng);
                prop_assert!(TreeTopology::from_internal(next.internal().iter().copied()).is_ok());
                prop_assert!(next.max_depth() <= 4);
                let diff = next.n_internal() as i64 - tree.n_internal() as i64;
                match kind {
                    MoveKind::Stay => prop_assert_eq!(diff, 0),
                    MoveKind::Grow => prop_assert_eq!(diff, 1),
                    MoveKind::Prune => prop_assert_eq!(diff, -1),
                }
            }
        }
    }
}
