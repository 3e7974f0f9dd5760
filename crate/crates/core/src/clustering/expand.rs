use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scene::{CameraId, WeightedEdge};

/// Live set of (possibly overlapping) clusters with incremental overlap sums,
/// so that `sum_{j != i} |V_i ∩ V_j| = sum_{v in V_i} (mult(v) - 1)` is O(1) to read.
#[derive(Debug, Clone)]
pub(crate) struct ClusterPool {
    clusters: Vec<Option<BTreeSet<CameraId>>>,
    membership: Vec<Vec<usize>>,
    overlap: Vec<usize>,
}

impl ClusterPool {
    pub fn new(num_cameras: usize) -> Self {
        Self {
            clusters: Vec::new(),
            membership: vec![Vec::new(); num_cameras],
            overlap: Vec::new(),
        }
    }

    pub fn insert(&mut self, cameras: &[CameraId]) -> usize {
        let k = self.clusters.len();
        self.clusters.push(Some(BTreeSet::new()));
        self.overlap.push(0);
        for &v in cameras {
            self.add_camera(k, v);
        }
        k
    }

    pub fn remove(&mut self, k: usize) -> BTreeSet<CameraId> {
        let set = self.clusters[k].take().expect("cluster already removed");
        for &v in &set {
            self.membership[v].retain(|&c| c != k);
            for &c in &self.membership[v] {
                self.overlap[c] -= 1;
            }
        }
        self.overlap[k] = 0;
        set
    }

    pub fn add_camera(&mut self, k: usize, v: CameraId) -> bool {
        let set = self.clusters[k].as_mut().expect("live cluster");
        if !set.insert(v) {
            return false;
        }
        for &c in &self.membership[v] {
            self.overlap[c] += 1;
        }
        self.overlap[k] += self.membership[v].len();
        self.membership[v].push(k);
        true
    }

    pub fn cameras(&self, k: usize) -> &BTreeSet<CameraId> {
        self.clusters[k].as_ref().expect("live cluster")
    }

    pub fn ratio(&self, k: usize) -> f64 {
        let set = self.cameras(k);
        if set.is_empty() {
            0.0
        } else {
            self.overlap[k] as f64 / set.len() as f64
        }
    }
}

/// Result of one expansion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub clusters: Vec<Vec<CameraId>>,
    pub ratios: Vec<f64>,
    /// Number of discarded edges handed to a cluster.
    pub edges_added: usize,
}

/// Graph expansion over disjoint `leaves`: discarded edges are visited by
/// descending weight (ties by ascending pair); each edge and its foreign
/// endpoint go to one of the two endpoint clusters whose completeness ratio is
/// still below `completeness_ratio`, chosen uniformly at random when both are.
pub fn expand(leaves: &[Vec<CameraId>], discarded: &[WeightedEdge], completeness_ratio: f64, seed: u64) -> Expansion {
    let num_cameras = leaves
        .iter()
        .flatten()
        .chain(discarded.iter().flat_map(|e| [&e.i, &e.j]))
        .max()
        .map_or(0, |&m| m + 1);
    let mut pool = ClusterPool::new(num_cameras);
    let ids: Vec<usize> = leaves.iter().map(|l| pool.insert(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges_added = expand_in_pool(&mut pool, &ids, discarded, completeness_ratio, &mut rng);
    Expansion {
        clusters: ids.iter().map(|&k| pool.cameras(k).iter().copied().collect()).collect(),
        ratios: ids.iter().map(|&k| pool.ratio(k)).collect(),
        edges_added,
    }
}

pub(crate) fn expand_in_pool(
    pool: &mut ClusterPool,
    receivers: &[usize],
    discarded: &[WeightedEdge],
    completeness_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    // home cluster of each camera among this round's receivers
    let mut home: Vec<Option<usize>> = vec![None; pool.membership.len()];
    for &k in receivers {
        for &v in pool.cameras(k) {
            home[v].get_or_insert(k);
        }
    }
    let mut order = discarded.to_vec();
    order.sort_by(|a, b| b.weight.cmp(&a.weight).then((a.i, a.j).cmp(&(b.i, b.j))));
    let mut added = 0;
    for e in order {
        let (Some(hi), Some(hj)) = (home[e.i], home[e.j]) else {
            continue;
        };
        if hi == hj {
            continue;
        }
        let open_i = pool.ratio(hi) < completeness_ratio;
        let open_j = pool.ratio(hj) < completeness_ratio;
        let target = match (open_i, open_j) {
            (true, true) => {
                if rng.random_bool(0.5) {
                    Some((hi, e.j))
                } else {
                    Some((hj, e.i))
                }
            }
            (true, false) => Some((hi, e.j)),
            (false, true) => Some((hj, e.i)),
            (false, false) => None,
        };
        if let Some((k, foreign)) = target {
            pool.add_camera(k, foreign);
            added += 1;
        }
    }
    added
}
