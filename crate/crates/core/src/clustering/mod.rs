//! Camera clustering under a size bound and a completeness (overlap) constraint.
//!
//! Graph division recursively bisects any cluster larger than `max_cluster_size`
//! with a normalized cut. Graph expansion then re-attaches discarded edges, with
//! their foreign endpoint, to clusters whose completeness ratio is still below
//! the threshold. The two steps alternate until no cluster violates the size
//! bound.
//!
//! The disjoint leaves of the first division are the *independent* clusters
//! (and the leaves of the [`ClusterTree`]); the final overlapping clusters are
//! the *interdependent* ones.

mod divide;
mod expand;
mod ncut;

pub use divide::{divide, ClusterTree, Division, TreeNode};
pub use expand::{expand, Expansion};
pub use ncut::{bisect_normalized_cut, normalized_cut_value};

use std::collections::BTreeSet;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{CameraGraph, CameraId, WeightedEdge};
use expand::{expand_in_pool, ClusterPool};

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("invalid clustering configuration: {0}")]
    Config(String),
    #[error("graph has no connected component with at least two cameras")]
    EmptyGraph,
    #[error("clusters still violate the size bound after {iterations} outer iterations")]
    NonTermination {
        iterations: usize,
        last: Box<ClusterSet>,
    },
    #[error("cluster file is inconsistent: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Upper bound on cameras per cluster.
    pub max_cluster_size: usize,
    /// Completeness ratio threshold in `[0, 1)`.
    pub completeness_ratio: f64,
    pub seed: u64,
    pub max_outer_iterations: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            max_cluster_size: 100,
            completeness_ratio: 0.7,
            seed: 0,
            max_outer_iterations: 16,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusteringError> {
        if self.max_cluster_size < 2 {
            return Err(ClusteringError::Config(format!(
                "max cluster size must be >= 2, got {}",
                self.max_cluster_size
            )));
        }
        if !(0.0..1.0).contains(&self.completeness_ratio) {
            return Err(ClusteringError::Config(format!(
                "completeness ratio must lie in [0, 1), got {}",
                self.completeness_ratio
            )));
        }
        if self.max_outer_iterations == 0 {
            return Err(ClusteringError::Config("max outer iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Sorted camera ids.
    pub cameras: Vec<CameraId>,
    /// All graph edges with both endpoints in the cluster.
    pub edges: Vec<WeightedEdge>,
}

impl Cluster {
    pub fn new(id: usize, cameras: Vec<CameraId>, graph: &CameraGraph) -> Self {
        let set: BTreeSet<_> = cameras.iter().copied().collect();
        let edges = graph.induced_edges(&set).copied().collect();
        Self { id, cameras, edges }
    }

    pub fn contains(&self, camera: CameraId) -> bool {
        self.cameras.binary_search(&camera).is_ok()
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// `sum_{j != i} |V_i ∩ V_j| / |V_i|` for `cluster` against `others`.
pub fn completeness_ratio<'a>(cluster: &[CameraId], others: impl IntoIterator<Item = &'a [CameraId]>) -> f64 {
    if cluster.is_empty() {
        return 0.0;
    }
    let set: BTreeSet<_> = cluster.iter().collect();
    let shared: usize = others
        .into_iter()
        .map(|o| o.iter().filter(|v| set.contains(v)).count())
        .sum();
    shared as f64 / cluster.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    /// Disjoint clusters from the first graph division.
    pub independent: Vec<Cluster>,
    /// Final overlapping clusters used for local reconstruction.
    pub interdependent: Vec<Cluster>,
    pub tree: ClusterTree,
    /// Graph edges not contained in any interdependent cluster.
    pub discarded: Vec<WeightedEdge>,
    /// Achieved completeness ratio per interdependent cluster.
    pub ratios: Vec<f64>,
    /// Interdependent clusters whose ratio stayed below the threshold because
    /// no discarded edge could raise it further.
    pub shortfall: Vec<usize>,
    /// Cameras in components smaller than two cameras.
    pub dropped: Vec<CameraId>,
    pub outer_iterations: usize,
}

impl ClusterSet {
    /// Interdependent clusters containing each camera.
    pub fn membership(&self, num_cameras: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_cameras];
        for c in &self.interdependent {
            for &v in &c.cameras {
                out[v].push(c.id);
            }
        }
        out
    }

    /// Independent cluster owning each camera, if any.
    pub fn owner(&self, num_cameras: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_cameras];
        for c in &self.independent {
            for &v in &c.cameras {
                out[v] = Some(c.id);
            }
        }
        out
    }

    pub fn completeness_ratio(&self, k: usize) -> f64 {
        let others = self
            .interdependent
            .iter()
            .filter(|c| c.id != k)
            .map(|c| c.cameras.as_slice());
        completeness_ratio(&self.interdependent[k].cameras, others)
    }

    /// Total cameras over all interdependent clusters divided by covered cameras.
    pub fn duplication_ratio(&self) -> f64 {
        let covered: BTreeSet<_> = self.interdependent.iter().flat_map(|c| c.cameras.iter()).collect();
        let total: usize = self.interdependent.iter().map(|c| c.len()).sum();
        if covered.is_empty() {
            0.0
        } else {
            total as f64 / covered.len() as f64
        }
    }

    /// Fraction of graph edges not covered by any interdependent cluster.
    pub fn discarded_ratio(&self, graph: &CameraGraph) -> f64 {
        if graph.edges().is_empty() {
            0.0
        } else {
            self.discarded.len() as f64 / graph.edges().len() as f64
        }
    }

    pub fn to_file(&self) -> ClusterSetFile {
        ClusterSetFile {
            independent: self.independent.iter().map(|c| c.cameras.clone()).collect(),
            interdependent: self.interdependent.iter().map(|c| c.cameras.clone()).collect(),
            tree: self.tree.root.clone(),
            discarded_edges: self.discarded.iter().map(|e| [e.i as u64, e.j as u64, e.weight]).collect(),
        }
    }

    /// Rebuilds a cluster set from its file form; edges and ratios are
    /// recomputed from `graph`.
    pub fn from_file(file: ClusterSetFile, graph: &CameraGraph, completeness_threshold: f64) -> Result<Self, ClusteringError> {
        let n = graph.num_cameras();
        let check = |cams: &[CameraId]| -> Result<Vec<CameraId>, ClusteringError> {
            let mut v = cams.to_vec();
            v.sort_unstable();
            v.dedup();
            if v.len() != cams.len() || v.last().is_some_and(|&m| m >= n) {
                return Err(ClusteringError::Format("cluster lists invalid or repeated cameras".into()));
            }
            Ok(v)
        };
        let independent = file
            .independent
            .iter()
            .enumerate()
            .map(|(id, c)| Ok(Cluster::new(id, check(c)?, graph)))
            .collect::<Result<Vec<_>, ClusteringError>>()?;
        let interdependent = file
            .interdependent
            .iter()
            .enumerate()
            .map(|(id, c)| Ok(Cluster::new(id, check(c)?, graph)))
            .collect::<Result<Vec<_>, ClusteringError>>()?;
        if !file.tree.check() {
            return Err(ClusteringError::Format("tree children do not partition their parent".into()));
        }
        let discarded = file
            .discarded_edges
            .iter()
            .map(|&[i, j, w]| WeightedEdge {
                i: i as usize,
                j: j as usize,
                weight: w,
            })
            .collect();
        let mut set = Self {
            independent,
            interdependent,
            tree: ClusterTree { root: file.tree },
            discarded,
            ratios: Vec::new(),
            shortfall: Vec::new(),
            dropped: Vec::new(),
            outer_iterations: 0,
        };
        set.ratios = (0..set.interdependent.len()).map(|k| set.completeness_ratio(k)).collect();
        set.shortfall = shortfall(&set.ratios, completeness_threshold);
        let covered: BTreeSet<_> = set.independent.iter().flat_map(|c| c.cameras.iter().copied()).collect();
        set.dropped = (0..n).filter(|v| !covered.contains(v)).collect();
        Ok(set)
    }

    /// Checks the structural invariants, returning a description of the first violation.
    pub fn check_invariants(&self, config: &ClusterConfig) -> Result<(), String> {
        for c in &self.interdependent {
            if c.len() > config.max_cluster_size {
                return Err(format!("cluster {} has {} > {} cameras", c.id, c.len(), config.max_cluster_size));
            }
        }
        for (k, &r) in self.ratios.iter().enumerate() {
            if r < config.completeness_ratio && !self.shortfall.contains(&k) {
                return Err(format!("cluster {k} ratio {r} below threshold without a shortfall report"));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &self.independent {
            for &v in &c.cameras {
                if !seen.insert(v) {
                    return Err(format!("camera {v} in two independent clusters"));
                }
            }
        }
        let inter: BTreeSet<_> = self.interdependent.iter().flat_map(|c| c.cameras.iter().copied()).collect();
        if !seen.is_subset(&inter) {
            return Err("interdependent clusters do not cover the independent ones".into());
        }
        if !self.tree.root.check() {
            return Err("cluster tree children do not partition their parents".into());
        }
        Ok(())
    }
}

fn shortfall(ratios: &[f64], threshold: f64) -> Vec<usize> {
    ratios
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < threshold)
        .map(|(k, _)| k)
        .collect()
}

/// On-disk cluster-set record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClusterSetFile {
    pub independent: Vec<Vec<CameraId>>,
    pub interdependent: Vec<Vec<CameraId>>,
    pub tree: TreeNode,
    pub discarded_edges: Vec<[u64; 3]>,
}

/// Alternates graph division and expansion until every cluster satisfies the
/// size bound.
pub fn cluster_cameras(graph: &CameraGraph, config: &ClusterConfig) -> Result<ClusterSet, ClusteringError> {
    config.validate()?;
    let mut components = Vec::new();
    let mut dropped = Vec::new();
    for comp in graph.connected_components() {
        if comp.len() < 2 {
            warn!("dropping isolated camera {}", comp[0]);
            dropped.extend(comp);
        } else {
            components.push(comp);
        }
    }
    if components.is_empty() {
        return Err(ClusteringError::EmptyGraph);
    }

    let max = config.max_cluster_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pool = ClusterPool::new(graph.num_cameras());
    let mut finished: Vec<usize> = Vec::new();
    let mut pending: Vec<Vec<CameraId>> = components;
    let mut first: Option<(Vec<Vec<CameraId>>, ClusterTree)> = None;
    let mut iterations = 0;

    while !pending.is_empty() {
        if iterations == config.max_outer_iterations {
            let mut ids = finished.clone();
            let extra: Vec<usize> = pending.iter().map(|p| pool.insert(p)).collect();
            ids.extend(extra);
            let (independent, tree) = first.clone().expect("first division ran");
            let last = assemble(graph, config, &pool, &ids, independent, tree, dropped, iterations);
            return Err(ClusteringError::NonTermination {
                iterations,
                last: Box::new(last),
            });
        }
        iterations += 1;

        let divisions: Vec<Division> = pending.par_iter().map(|cams| divide(graph, cams, max)).collect();
        pending.clear();
        if first.is_none() {
            let leaves: Vec<Vec<CameraId>> = divisions.iter().flat_map(|d| d.leaves.iter().cloned()).collect();
            let tree = ClusterTree::join(divisions.iter().map(|d| d.tree.clone()).collect()).expect("non-empty");
            first = Some((leaves, tree));
        }
        let mut receivers = Vec::new();
        let mut discarded = Vec::new();
        for d in &divisions {
            for leaf in &d.leaves {
                receivers.push(pool.insert(leaf));
            }
            discarded.extend_from_slice(&d.discarded);
        }
        expand_in_pool(&mut pool, &receivers, &discarded, config.completeness_ratio, &mut rng);
        for k in receivers {
            if pool.cameras(k).len() <= max {
                finished.push(k);
            } else {
                pending.push(pool.remove(k).into_iter().collect());
            }
        }
    }

    let (independent, tree) = first.expect("at least one division");
    Ok(assemble(graph, config, &pool, &finished, independent, tree, dropped, iterations))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    graph: &CameraGraph,
    config: &ClusterConfig,
    pool: &ClusterPool,
    ids: &[usize],
    independent: Vec<Vec<CameraId>>,
    tree: ClusterTree,
    dropped: Vec<CameraId>,
    iterations: usize,
) -> ClusterSet {
    let interdependent: Vec<Cluster> = ids
        .iter()
        .enumerate()
        .map(|(id, &k)| Cluster::new(id, pool.cameras(k).iter().copied().collect(), graph))
        .collect();
    let independent: Vec<Cluster> = independent
        .into_iter()
        .enumerate()
        .map(|(id, cams)| Cluster::new(id, cams, graph))
        .collect();
    let mut set = ClusterSet {
        independent,
        interdependent,
        tree,
        discarded: Vec::new(),
        ratios: Vec::new(),
        shortfall: Vec::new(),
        dropped,
        outer_iterations: iterations,
    };
    set.ratios = (0..set.interdependent.len()).map(|k| set.completeness_ratio(k)).collect();
    set.shortfall = shortfall(&set.ratios, config.completeness_ratio);
    let membership = set.membership(graph.num_cameras());
    set.discarded = graph
        .edges()
        .iter()
        .filter(|e| !membership[e.i].iter().any(|k| membership[e.j].contains(k)))
        .copied()
        .collect();
    set
}
