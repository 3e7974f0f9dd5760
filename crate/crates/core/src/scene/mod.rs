//! Core data model: cameras, poses, match graph, synthetic ground truth and file I/O.
//!
//! Intrinsics are known and never optimized. Rotations are world-to-camera and
//! positions are stored as camera centers, so `x_cam = R (X - c)` everywhere.

mod camera;
mod graph;
pub mod io;
mod synthetic;

pub use camera::{project_point, Camera, CameraId, Intrinsics, Pose};
pub use graph::{build_camera_graph, CameraGraph, Correspondence, MatchEdge, WeightedEdge};
pub use synthetic::{generate_synthetic_scene, random_camera_graph, Feature, Layout, SyntheticConfig, SyntheticScene};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(CameraId, CameraId),
    #[error("self loop on camera {0}")]
    SelfLoop(CameraId),
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("invalid edge: {0}")]
    InvalidEdge(String),
    #[error("need at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
