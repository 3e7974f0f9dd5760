use serde::{Deserialize, Serialize};

use super::ncut::bisect_normalized_cut;
use crate::scene::{CameraGraph, CameraId, WeightedEdge};

/// Node of the binary division tree. Leaves are independent clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TreeNode {
    pub cameras: Vec<CameraId>,
    /// Edges cut when this node was split; empty for leaves.
    #[serde(with = "edge_triples")]
    pub cut_edges: Vec<WeightedEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Box<[TreeNode; 2]>>,
    /// Index of the independent cluster this leaf corresponds to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf: Option<usize>,
}

impl TreeNode {
    pub fn leaf(cameras: Vec<CameraId>) -> Self {
        Self {
            cameras,
            cut_edges: Vec::new(),
            children: None,
            leaf: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn depth(&self) -> usize {
        match &self.children {
            None => 0,
            Some(c) => 1 + c[0].depth().max(c[1].depth()),
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a TreeNode>) {
        match &self.children {
            None => out.push(self),
            Some(c) => {
                c[0].collect_leaves(out);
                c[1].collect_leaves(out);
            }
        }
    }

    /// All cut edges in the subtree, in pre-order.
    pub fn all_cut_edges(&self) -> Vec<WeightedEdge> {
        let mut out = self.cut_edges.clone();
        if let Some(c) = &self.children {
            out.extend(c[0].all_cut_edges());
            out.extend(c[1].all_cut_edges());
        }
        out
    }

    fn number_leaves(&mut self, next: &mut usize) {
        match &mut self.children {
            None => {
                self.leaf = Some(*next);
                *next += 1;
            }
            Some(c) => {
                c[0].number_leaves(next);
                c[1].number_leaves(next);
            }
        }
    }

    /// Checks the structural invariants: children partition their parent.
    pub fn check(&self) -> bool {
        match &self.children {
            None => true,
            Some(c) => {
                let mut union: Vec<_> = c[0].cameras.iter().chain(&c[1].cameras).copied().collect();
                union.sort_unstable();
                let disjoint = union.windows(2).all(|w| w[0] != w[1]);
                disjoint && union == self.cameras && c[0].check() && c[1].check()
            }
        }
    }
}

/// Hierarchical cluster tree built by recursive bisection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub root: TreeNode,
}

impl ClusterTree {
    /// Joins several subtrees under balanced binary internal nodes with no cut edges.
    pub fn join(mut nodes: Vec<TreeNode>) -> Option<Self> {
        if nodes.is_empty() {
            return None;
        }
        while nodes.len() > 1 {
            let mut next = Vec::with_capacity(nodes.len().div_ceil(2));
            let mut iter = nodes.into_iter();
            while let Some(a) = iter.next() {
                match iter.next() {
                    Some(b) => {
                        let mut cameras: Vec<_> = a.cameras.iter().chain(&b.cameras).copied().collect();
                        cameras.sort_unstable();
                        next.push(TreeNode {
                            cameras,
                            cut_edges: Vec::new(),
                            children: Some(Box::new([a, b])),
                            leaf: None,
                        });
                    }
                    None => next.push(a),
                }
            }
            nodes = next;
        }
        let mut root = nodes.pop().expect("non-empty");
        let mut next = 0;
        root.number_leaves(&mut next);
        Some(Self { root })
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        self.root.leaves()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }
}

/// Output of recursive graph division.
#[derive(Debug, Clone)]
pub struct Division {
    /// Disjoint camera sets, each of size at most the bound, left-to-right.
    pub leaves: Vec<Vec<CameraId>>,
    pub tree: TreeNode,
    /// Edges whose endpoints ended in different leaves, sorted by pair.
    pub discarded: Vec<WeightedEdge>,
}

/// Recursively bisects `cameras` until every part has at most `max_size` cameras.
pub fn divide(graph: &CameraGraph, cameras: &[CameraId], max_size: usize) -> Division {
    assert!(max_size >= 2, "cluster size bound must be at least 2");
    let mut sorted = cameras.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let tree = divide_node(graph, sorted, max_size);
    let leaves = tree.leaves().into_iter().map(|l| l.cameras.clone()).collect();
    let mut discarded = tree.all_cut_edges();
    discarded.sort_unstable();
    Division {
        leaves,
        tree,
        discarded,
    }
}

fn divide_node(graph: &CameraGraph, cameras: Vec<CameraId>, max_size: usize) -> TreeNode {
    if cameras.len() <= max_size {
        return TreeNode::leaf(cameras);
    }
    let (a, b) = bisect_normalized_cut(graph, &cameras);
    let cut_edges = cut_between(graph, &a, &b);
    let (left, right) = rayon::join(
        || divide_node(graph, a, max_size),
        || divide_node(graph, b, max_size),
    );
    TreeNode {
        cameras,
        cut_edges,
        children: Some(Box::new([left, right])),
        leaf: None,
    }
}

fn cut_between(graph: &CameraGraph, a: &[CameraId], b: &[CameraId]) -> Vec<WeightedEdge> {
    let mut out = Vec::new();
    for &v in a {
        for &(u, w) in graph.neighbors(v) {
            if b.binary_search(&u).is_ok() {
                out.push(WeightedEdge {
                    i: v.min(u),
                    j: v.max(u),
                    weight: w,
                });
            }
        }
    }
    out.sort_unstable();
    out
}

mod edge_triples {
    use super::WeightedEdge;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(edges: &[WeightedEdge], s: S) -> Result<S::Ok, S::Error> {
        let triples: Vec<(usize, usize, u64)> = edges.iter().map(|e| (e.i, e.j, e.weight)).collect();
        triples.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<WeightedEdge>, D::Error> {
        let triples: Vec<(usize, usize, u64)> = Vec::deserialize(d)?;
        Ok(triples
            .into_iter()
            .map(|(i, j, weight)| WeightedEdge { i, j, weight })
            .collect())
    }
}
