//! Cluster-parallel structure from motion.
//!
//! The camera match graph is divided into overlapping clusters, each cluster is
//! reconstructed independently with incremental SfM, and the clusters' relative
//! motions are fused into global poses by rotation averaging and an L1
//! translation averaging that solves cluster scales and camera centers jointly.
//! Triangulation and bundle adjustment are then partitioned by the disjoint
//! clusters.

pub mod ba;
pub mod clustering;
pub mod evaluation;
pub mod geometry;
pub mod local_sfm;
pub mod motion_averaging;
pub mod pipeline;
pub mod scene;
pub mod so3;
pub mod tracks;
pub mod triangulation_ba;

/// Stable per-unit seed derived from a global seed (splitmix64 mixing), so
/// that randomized work items do not depend on scheduling.
pub fn derive_seed(global: u64, unit: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(global ^ mix(unit))
}
