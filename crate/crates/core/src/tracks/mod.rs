//! Feature tracks built bottom-up over the cluster tree.
//!
//! Leaves union the matches internal to one independent cluster; each internal
//! node merges its two children's components through the matches that were cut
//! when that node was divided. Inconsistent components (two features of one
//! camera) are carried up as rejected and only dropped at the root, so that a
//! component rejected low in the tree still absorbs, and rejects, whatever
//! it is later joined to. The result is identical to one flat union-find over
//! all matches.

mod union_find;

pub use union_find::UnionFind;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::Point2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clustering::{ClusterTree, TreeNode};
use crate::scene::{CameraId, MatchEdge};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("input integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `(camera, feature)` packed into one 64-bit key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey(pub u64);

impl FeatureKey {
    pub fn new(camera: CameraId, feature: u32) -> Self {
        Self(((camera as u64) << 32) | feature as u64)
    }

    pub fn camera(self) -> CameraId {
        (self.0 >> 32) as CameraId
    }

    pub fn feature(self) -> u32 {
        self.0 as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackElement {
    pub camera: CameraId,
    pub feature: u32,
    pub point: Point2<f64>,
}

impl TrackElement {
    pub fn key(&self) -> FeatureKey {
        FeatureKey::new(self.camera, self.feature)
    }
}

/// A consistent set of observations of one 3D point, at most one per camera,
/// sorted by camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub elements: Vec<TrackElement>,
}

impl Track {
    pub fn cameras(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.elements.iter().map(|e| e.camera)
    }

    pub fn observation(&self, camera: CameraId) -> Option<&TrackElement> {
        self.elements
            .binary_search_by_key(&camera, |e| e.camera)
            .ok()
            .map(|i| &self.elements[i])
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    id: usize,
    elements: Vec<(CameraId, u32, f64, f64)>,
}

impl Serialize for Track {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrackRecord {
            id: self.id,
            elements: self
                .elements
                .iter()
                .map(|e| (e.camera, e.feature, e.point.x, e.point.y))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Track {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = TrackRecord::deserialize(d)?;
        Ok(Track {
            id: r.id,
            elements: r
                .elements
                .into_iter()
                .map(|(camera, feature, x, y)| TrackElement {
                    camera,
                    feature,
                    point: Point2::new(x, y),
                })
                .collect(),
        })
    }
}

/// One connected component of the correspondence relation at a tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Elements sorted by `(camera, feature)`.
    #[serde(with = "element_tuples")]
    pub elements: Vec<TrackElement>,
    pub consistent: bool,
}

impl Component {
    fn from_elements(mut elements: Vec<TrackElement>, parts_consistent: bool) -> Self {
        elements.sort_by_key(|e| e.key());
        let one_per_camera = elements.windows(2).all(|w| w[0].camera != w[1].camera);
        Self {
            elements,
            consistent: parts_consistent && one_per_camera,
        }
    }
}

/// Intermediate track state of one tree node.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeTracks {
    pub components: Vec<Component>,
}

impl NodeTracks {
    /// Consistent components, i.e. the tracks as seen from this node.
    pub fn tracks(&self) -> Vec<Track> {
        finalize(self.clone())
    }

    /// Total number of feature observations held by this node.
    pub fn payload(&self) -> usize {
        self.components.iter().map(|c| c.elements.len()).sum()
    }
}

/// Records pixel locations per feature key, rejecting contradictory ones.
struct FeatureTable {
    index: HashMap<FeatureKey, usize>,
    elements: Vec<TrackElement>,
}

impl FeatureTable {
    fn new() -> Self {
        Self {
            index: HashMap::new(),
            elements: Vec::new(),
        }
    }

    fn intern(&mut self, camera: CameraId, feature: u32, point: Point2<f64>) -> Result<usize, TrackError> {
        let key = FeatureKey::new(camera, feature);
        if let Some(&idx) = self.index.get(&key) {
            if self.elements[idx].point != point {
                return Err(TrackError::Integrity(format!(
                    "feature {feature} of camera {camera} has two different image locations"
                )));
            }
            return Ok(idx);
        }
        let idx = self.elements.len();
        self.index.insert(key, idx);
        self.elements.push(TrackElement { camera, feature, point });
        Ok(idx)
    }
}

fn check_cameras(cameras: &[CameraId], matches: &[MatchEdge]) -> Result<(), TrackError> {
    for m in matches {
        for c in [m.i, m.j] {
            if cameras.binary_search(&c).is_err() {
                return Err(TrackError::Integrity(format!(
                    "match ({}, {}) references camera {c} outside the node",
                    m.i, m.j
                )));
            }
        }
    }
    Ok(())
}

/// Connected components of the correspondences internal to one leaf.
/// `cameras` must be sorted.
pub fn generate_tracks_leaf(cameras: &[CameraId], matches: &[MatchEdge]) -> Result<NodeTracks, TrackError> {
    check_cameras(cameras, matches)?;
    let mut table = FeatureTable::new();
    let mut pairs = Vec::new();
    for m in matches {
        for c in &m.correspondences {
            let a = table.intern(m.i, c.feature_i, c.point_i)?;
            let b = table.intern(m.j, c.feature_j, c.point_j)?;
            pairs.push((a, b));
        }
    }
    let mut uf = UnionFind::new(table.elements.len());
    for (a, b) in pairs {
        uf.union(a, b);
    }
    let mut groups: HashMap<usize, Vec<TrackElement>> = HashMap::new();
    for (idx, e) in table.elements.iter().enumerate() {
        groups.entry(uf.find(idx)).or_default().push(*e);
    }
    let mut components: Vec<Component> = groups
        .into_values()
        .map(|els| Component::from_elements(els, true))
        .collect();
    components.sort_by(|a, b| a.elements[0].key().cmp(&b.elements[0].key()));
    Ok(NodeTracks { components })
}

/// Joins two children's components through the matches cut between them.
/// Components not touched by any cross match pass through unchanged.
pub fn merge_tracks(left: NodeTracks, right: NodeTracks, cross: &[MatchEdge]) -> Result<NodeTracks, TrackError> {
    let mut comps: Vec<Component> = left.components;
    comps.extend(right.components);
    let mut table = FeatureTable::new();
    // component id for each interned feature
    let mut owner: Vec<usize> = Vec::new();
    for (cid, c) in comps.iter().enumerate() {
        for e in &c.elements {
            let idx = table.intern(e.camera, e.feature, e.point)?;
            if idx < owner.len() {
                return Err(TrackError::Integrity(format!(
                    "feature {} of camera {} appears in two components",
                    e.feature, e.camera
                )));
            }
            owner.push(cid);
        }
    }
    let mut uf = UnionFind::new(comps.len());
    let mut touched = vec![false; comps.len()];
    for m in cross {
        for c in &m.correspondences {
            let ends = [(m.i, c.feature_i, c.point_i), (m.j, c.feature_j, c.point_j)];
            let mut ids = [0usize; 2];
            for (slot, (cam, f, p)) in ends.into_iter().enumerate() {
                let idx = table.intern(cam, f, p)?;
                if idx == owner.len() {
                    // unseen feature: a new singleton component
                    let cid = uf.push();
                    comps.push(Component {
                        elements: vec![table.elements[idx]],
                        consistent: true,
                    });
                    touched.push(true);
                    owner.push(cid);
                }
                ids[slot] = owner[idx];
                touched[ids[slot]] = true;
            }
            uf.union(ids[0], ids[1]);
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for cid in 0..comps.len() {
        groups.entry(uf.find(cid)).or_default().push(cid);
    }
    let mut merged = Vec::with_capacity(groups.len());
    for (_, members) in groups {
        if members.len() == 1 && !touched[members[0]] {
            merged.push(std::mem::replace(
                &mut comps[members[0]],
                Component {
                    elements: Vec::new(),
                    consistent: true,
                },
            ));
            continue;
        }
        let consistent = members.iter().all(|&m| comps[m].consistent);
        let elements: Vec<TrackElement> = members
            .iter()
            .flat_map(|&m| std::mem::take(&mut comps[m].elements))
            .collect();
        merged.push(Component::from_elements(elements, consistent));
    }
    merged.sort_by(|a, b| a.elements[0].key().cmp(&b.elements[0].key()));
    Ok(NodeTracks { components: merged })
}

/// Drops rejected and single-observation components and assigns ids in
/// canonical order (by the sorted element keys).
pub fn finalize(node: NodeTracks) -> Vec<Track> {
    let mut tracks: Vec<Vec<TrackElement>> = node
        .components
        .into_iter()
        .filter(|c| c.consistent && c.elements.len() >= 2)
        .map(|c| c.elements)
        .collect();
    tracks.sort_by(|a, b| a.iter().map(|e| e.key()).cmp(b.iter().map(|e| e.key())));
    tracks
        .into_iter()
        .enumerate()
        .map(|(id, elements)| Track { id, elements })
        .collect()
}

/// Assigns every match to the deepest tree node containing both cameras.
fn route_matches<'m>(tree: &ClusterTree, matches: &'m [MatchEdge]) -> Result<HashMap<String, Vec<&'m MatchEdge>>, TrackError> {
    let mut routed: HashMap<String, Vec<&MatchEdge>> = HashMap::new();
    for m in matches {
        let mut node = &tree.root;
        let mut path = String::from("r");
        if node.cameras.binary_search(&m.i).is_err() || node.cameras.binary_search(&m.j).is_err() {
            return Err(TrackError::Integrity(format!(
                "match ({}, {}) references a camera outside the cluster tree",
                m.i, m.j
            )));
        }
        while let Some(children) = &node.children {
            let side_i = usize::from(children[0].cameras.binary_search(&m.i).is_err());
            let side_j = usize::from(children[0].cameras.binary_search(&m.j).is_err());
            if side_i != side_j {
                break;
            }
            node = &children[side_i];
            path.push(if side_i == 0 { '0' } else { '1' });
        }
        routed.entry(path).or_default().push(m);
    }
    Ok(routed)
}

/// Hierarchical track generation over `tree`. When `staging` is set, each
/// node's intermediate state is written there as `<node path>.json`.
pub fn generate_tracks(tree: &ClusterTree, matches: &[MatchEdge]) -> Result<Vec<Track>, TrackError> {
    generate_tracks_staged(tree, matches, None)
}

pub fn generate_tracks_staged(tree: &ClusterTree, matches: &[MatchEdge], staging: Option<&Path>) -> Result<Vec<Track>, TrackError> {
    let routed = route_matches(tree, matches)?;
    if let Some(dir) = staging {
        fs::create_dir_all(dir)?;
    }
    let root = process_node(&tree.root, "r".to_string(), &routed, staging)?;
    Ok(finalize(root))
}

fn process_node(
    node: &TreeNode,
    path: String,
    routed: &HashMap<String, Vec<&MatchEdge>>,
    staging: Option<&Path>,
) -> Result<NodeTracks, TrackError> {
    let own: Vec<MatchEdge> = routed
        .get(&path)
        .map(|v| v.iter().map(|&m| m.clone()).collect())
        .unwrap_or_default();
    let result = match &node.children {
        None => generate_tracks_leaf(&node.cameras, &own)?,
        Some(children) => {
            let (left, right) = rayon::join(
                || process_node(&children[0], format!("{path}0"), routed, staging),
                || process_node(&children[1], format!("{path}1"), routed, staging),
            );
            merge_tracks(left?, right?, &own)?
        }
    };
    if let Some(dir) = staging {
        let bytes = serde_json::to_vec(&result)?;
        fs::write(dir.join(format!("{path}.json")), bytes)?;
    }
    Ok(result)
}

pub(crate) mod element_tuples {
    use super::TrackElement;
    use nalgebra::Point2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(els: &[TrackElement], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<_> = els.iter().map(|e| (e.camera, e.feature, e.point.x, e.point.y)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<TrackElement>, D::Error> {
        let v: Vec<(usize, u32, f64, f64)> = Vec::deserialize(d)?;
        Ok(v
            .into_iter()
            .map(|(camera, feature, x, y)| TrackElement {
                camera,
                feature,
                point: Point2::new(x, y),
            })
            .collect())
    }
}
