//! Multi-view geometry primitives: RANSAC, two-view epipolar geometry,
//! linear resection and linear triangulation.

pub mod epipolar;
pub mod ransac;
pub mod resection;
pub mod triangulate;

pub use epipolar::{
    decompose_essential, epipolar_distance, essential_eight_point, fundamental_from_poses, recover_pose, sampson_distance,
    EssentialEstimator,
};
pub use ransac::{ransac, Estimator, RansacConfig, RansacResult};
pub use resection::{refine_pose, reprojection_error, resection_dlt, ResectionEstimator};
pub use triangulate::{
    bearing, max_ray_angle, max_reprojection_error, triangulate_checked, triangulate_dlt, triangulation_angle, TriangulationCheck,
    TriangulationError, View,
};
