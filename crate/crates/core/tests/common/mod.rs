#![allow(dead_code)]

pub mod motion;

use csfm_core::clustering::{Cluster, ClusterTree, TreeNode};
use csfm_core::scene::{build_camera_graph, generate_synthetic_scene, CameraGraph, Layout, MatchEdge, Pose, SyntheticConfig, SyntheticScene};
use csfm_core::tracks::{generate_tracks, Track};

pub struct Fixture {
    pub scene: SyntheticScene,
    pub matches: Vec<MatchEdge>,
    pub graph: CameraGraph,
}

pub fn fixture(layout: Layout, cameras: usize, points: usize, sigma: f64, outliers: f64, seed: u64) -> Fixture {
    let cfg = SyntheticConfig::new(layout, cameras, points).with_noise(sigma, outliers).with_seed(seed);
    let (scene, matches) = generate_synthetic_scene(&cfg).unwrap();
    let graph = build_camera_graph(&matches, cameras).unwrap();
    Fixture { scene, matches, graph }
}

impl Fixture {
    /// One cluster holding the given cameras.
    pub fn cluster(&self, id: usize, cameras: Vec<usize>) -> Cluster {
        Cluster::new(id, cameras, &self.graph)
    }

    pub fn all_cameras(&self) -> Vec<usize> {
        (0..self.scene.poses.len()).collect()
    }

    pub fn tracks(&self) -> Vec<Track> {
        let tree = ClusterTree::join(vec![TreeNode::leaf(self.all_cameras())]).unwrap();
        generate_tracks(&tree, &self.matches).unwrap()
    }

    pub fn gt(&self) -> Vec<Option<Pose>> {
        self.scene.poses.iter().map(|&p| Some(p)).collect()
    }
}
