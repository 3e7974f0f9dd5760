mod common;

use std::collections::BTreeSet;

use csfm_core::clustering::{cluster_cameras, ClusterConfig, ClusterSet};
use csfm_core::scene::Layout;

fn config(max: usize, seed: u64) -> ClusterConfig {
    ClusterConfig { max_cluster_size: max, seed, ..ClusterConfig::default() }
}

#[test]
fn clusters_respect_the_size_bound_and_cover_the_graph() {
    let f = common::fixture(Layout::Loop, 60, 2000, 0.5, 0.0, 2);
    let cfg = config(15, 1);
    let set = cluster_cameras(&f.graph, &cfg).unwrap();
    set.check_invariants(&cfg).unwrap();
    assert!(set.independent.len() >= 4);
    let mut seen = BTreeSet::new();
    for c in &set.independent {
        for &v in &c.cameras {
            assert!(seen.insert(v), "camera {v} in two independent clusters");
        }
    }
    assert_eq!(seen.len() + set.dropped.len(), 60);
    assert!(set.interdependent.iter().all(|c| c.len() <= 15));
}

#[test]
fn same_seed_gives_same_clusters() {
    let f = common::fixture(Layout::Grid, 49, 1500, 0.5, 0.0, 4);
    let a = cluster_cameras(&f.graph, &config(12, 9)).unwrap();
    let b = cluster_cameras(&f.graph, &config(12, 9)).unwrap();
    assert_eq!(a.to_file(), b.to_file());
}

#[test]
fn cluster_file_round_trips() {
    let f = common::fixture(Layout::Orbit, 30, 900, 0.5, 0.0, 6);
    let cfg = config(10, 0);
    let set = cluster_cameras(&f.graph, &cfg).unwrap();
    let back = ClusterSet::from_file(set.to_file(), &f.graph, cfg.completeness_ratio).unwrap();
    assert_eq!(back.membership(30), set.membership(30));
    assert_eq!(back.ratios, set.ratios);
}

#[test]
fn invalid_configuration_is_rejected() {
    let f = common::fixture(Layout::Orbit, 12, 300, 0.0, 0.0, 0);
    assert!(cluster_cameras(&f.graph, &config(1, 0)).is_err());
    let bad = ClusterConfig { completeness_ratio: 1.0, ..ClusterConfig::default() };
    assert!(cluster_cameras(&f.graph, &bad).is_err());
}
