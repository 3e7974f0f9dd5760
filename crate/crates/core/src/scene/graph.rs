use std::collections::{BTreeMap, BTreeSet, HashSet};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use super::{CameraId, SceneError};

/// One verified correspondence between feature `feature_i` of camera `i`
/// and feature `feature_j` of camera `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub feature_i: u32,
    pub point_i: Point2<f64>,
    pub feature_j: u32,
    pub point_j: Point2<f64>,
}

/// Inlier correspondences of one camera pair, `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEdge {
    pub i: CameraId,
    pub j: CameraId,
    pub correspondences: Vec<Correspondence>,
}

impl MatchEdge {
    /// Builds an edge, swapping sides if needed so that `i < j`.
    pub fn new(a: CameraId, b: CameraId, mut correspondences: Vec<Correspondence>) -> Self {
        if a > b {
            for c in &mut correspondences {
                std::mem::swap(&mut c.feature_i, &mut c.feature_j);
                std::mem::swap(&mut c.point_i, &mut c.point_j);
            }
            Self {
                i: b,
                j: a,
                correspondences,
            }
        } else {
            Self {
                i: a,
                j: b,
                correspondences,
            }
        }
    }

    pub fn weight(&self) -> usize {
        self.correspondences.len()
    }

    pub fn validate(&self, num_cameras: usize) -> Result<(), SceneError> {
        if self.i == self.j {
            return Err(SceneError::SelfLoop(self.i));
        }
        if self.i > self.j {
            return Err(SceneError::InvalidEdge(format!(
                "edge ({}, {}) is not ordered i < j",
                self.i, self.j
            )));
        }
        if self.j >= num_cameras {
            return Err(SceneError::UnknownCamera(self.j));
        }
        if self.correspondences.is_empty() {
            return Err(SceneError::InvalidEdge(format!(
                "edge ({}, {}) has no correspondences",
                self.i, self.j
            )));
        }
        let mut left = HashSet::with_capacity(self.correspondences.len());
        let mut right = HashSet::with_capacity(self.correspondences.len());
        for c in &self.correspondences {
            if !left.insert(c.feature_i) || !right.insert(c.feature_j) {
                return Err(SceneError::InvalidEdge(format!(
                    "edge ({}, {}) repeats a feature index",
                    self.i, self.j
                )));
            }
        }
        Ok(())
    }
}

/// Weighted undirected camera graph, `w(e_ij) = |M_ij|`.
///
/// Each unordered pair is stored once with `i < j`; edges are kept sorted by pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct CameraGraph {
    num_cameras: usize,
    edges: Vec<WeightedEdge>,
    adjacency: Vec<Vec<(CameraId, u64)>>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    num_cameras: usize,
    edges: Vec<(CameraId, CameraId, u64)>,
}

impl From<CameraGraph> for GraphRecord {
    fn from(g: CameraGraph) -> Self {
        Self {
            num_cameras: g.num_cameras,
            edges: g.edges.iter().map(|e| (e.i, e.j, e.weight)).collect(),
        }
    }
}

impl TryFrom<GraphRecord> for CameraGraph {
    type Error = SceneError;

    fn try_from(r: GraphRecord) -> Result<Self, SceneError> {
        CameraGraph::from_weighted_edges(r.num_cameras, r.edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub i: CameraId,
    pub j: CameraId,
    pub weight: u64,
}

impl CameraGraph {
    /// Builds a graph directly from weighted pairs. Used for clustering-only
    /// experiments where no correspondences exist.
    pub fn from_weighted_edges(
        num_cameras: usize,
        edges: impl IntoIterator<Item = (CameraId, CameraId, u64)>,
    ) -> Result<Self, SceneError> {
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            if a == b {
                return Err(SceneError::SelfLoop(a));
            }
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if j >= num_cameras {
                return Err(SceneError::UnknownCamera(j));
            }
            if w == 0 {
                return Err(SceneError::InvalidEdge(format!("edge ({i}, {j}) has zero weight")));
            }
            if map.insert((i, j), w).is_some() {
                return Err(SceneError::DuplicateEdge(i, j));
            }
        }
        let edges = map
            .into_iter()
            .map(|((i, j), weight)| WeightedEdge { i, j, weight })
            .collect();
        Ok(Self::assemble(num_cameras, edges))
    }

    fn assemble(num_cameras: usize, edges: Vec<WeightedEdge>) -> Self {
        let mut adjacency = vec![Vec::new(); num_cameras];
        for e in &edges {
            adjacency[e.i].push((e.j, e.weight));
            adjacency[e.j].push((e.i, e.weight));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            num_cameras,
            edges,
            adjacency,
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn edges(&self) -> &[WeightedEdge] {
        &self.edges
    }

    pub fn neighbors(&self, camera: CameraId) -> &[(CameraId, u64)] {
        &self.adjacency[camera]
    }

    pub fn weight(&self, a: CameraId, b: CameraId) -> Option<u64> {
        self.adjacency[a]
            .binary_search_by_key(&b, |&(n, _)| n)
            .ok()
            .map(|idx| self.adjacency[a][idx].1)
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Edges with both endpoints in `cameras`.
    pub fn induced_edges<'a>(
        &'a self,
        cameras: &'a BTreeSet<CameraId>,
    ) -> impl Iterator<Item = &'a WeightedEdge> + 'a {
        self.edges
            .iter()
            .filter(move |e| cameras.contains(&e.i) && cameras.contains(&e.j))
    }

    /// Connected components over all cameras (isolated cameras form singletons),
    /// each sorted, ordered by smallest member.
    pub fn connected_components(&self) -> Vec<Vec<CameraId>> {
        let mut label = vec![usize::MAX; self.num_cameras];
        let mut components = Vec::new();
        for start in 0..self.num_cameras {
            if label[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut stack = vec![start];
            label[start] = id;
            let mut members = Vec::new();
            while let Some(v) = stack.pop() {
                members.push(v);
                for &(n, _) in &self.adjacency[v] {
                    if label[n] == usize::MAX {
                        label[n] = id;
                        stack.push(n);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        components
    }
}

/// Builds the camera graph from verified matches; isolated cameras are kept as nodes.
pub fn build_camera_graph(matches: &[MatchEdge], num_cameras: usize) -> Result<CameraGraph, SceneError> {
    if num_cameras < 2 {
        return Err(SceneError::TooFewCameras(num_cameras));
    }
    let mut seen = HashSet::with_capacity(matches.len());
    let mut edges = Vec::with_capacity(matches.len());
    for m in matches {
        m.validate(num_cameras)?;
        if !seen.insert((m.i, m.j)) {
            return Err(SceneError::DuplicateEdge(m.i, m.j));
        }
        edges.push(WeightedEdge {
            i: m.i,
            j: m.j,
            weight: m.weight() as u64,
        });
    }
    edges.sort_unstable();
    Ok(CameraGraph::assemble(num_cameras, edges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(i: usize, j: usize, n: u32) -> MatchEdge {
        let correspondences = (0..n)
            .map(|k| Correspondence {
                feature_i: k,
                point_i: Point2::new(k as f64, 0.0),
                feature_j: k,
                point_j: Point2::new(0.0, k as f64),
            })
            .collect();
        MatchEdge::new(i, j, correspondences)
    }

    #[test]
    fn weights_are_correspondence_counts() {
        let g = build_camera_graph(&[edge(0, 1, 50), edge(1, 2, 20)], 3).unwrap();
        assert_eq!(g.weight(0, 1), Some(50));
        assert_eq!(g.weight(2, 1), Some(20));
        assert_eq!(g.weight(0, 2), None);
    }

    #[test]
    fn empty_matches_keep_nodes() {
        let g = build_camera_graph(&[], 2).unwrap();
        assert_eq!(g.num_cameras(), 2);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn cycle_total_weight() {
        let matches: Vec<_> = (0..4).map(|k| edge(k, (k + 1) % 4, 10)).collect();
        let g = build_camera_graph(&matches, 4).unwrap();
        assert_eq!(g.edges().len(), 4);
        assert!(g.edges().iter().all(|e| e.weight == 10));
        assert_eq!(g.total_weight(), 40);
    }

    #[test]
    fn duplicate_edges_rejected() {
        let err = build_camera_graph(&[edge(0, 1, 3), edge(1, 0, 2)], 2).unwrap_err();
        assert!(matches!(err, SceneError::DuplicateEdge(0, 1)));
    }

    #[test]
    fn reversed_edge_is_normalized() {
        let e = edge(3, 1, 2);
        assert_eq!((e.i, e.j), (1, 3));
        assert_eq!(e.correspondences[1].point_i, Point2::new(0.0, 1.0));
    }

    #[test]
    fn repeated_feature_rejected() {
        let mut e = edge(0, 1, 2);
        e.correspondences[1].feature_i = 0;
        assert!(build_camera_graph(&[e], 2).is_err());
    }

    #[test]
    fn isolated_camera_is_its_own_component() {
        let g = build_camera_graph(&[edge(0, 1, 3)], 3).unwrap();
        assert_eq!(g.connected_components(), vec![vec![0, 1], vec![2]]);
    }
}
