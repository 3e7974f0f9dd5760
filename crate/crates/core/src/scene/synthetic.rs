//! Ground-truth scene generator used in place of real image collections.
//!
//! Camera layouts are a function of the layout and camera count only; the seed
//! drives the 3D points, pixel noise and outlier injection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{project_point, Camera, CameraGraph, CameraId, Correspondence, Intrinsics, MatchEdge, Pose, SceneError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Layout {
    /// Cameras on a downward-looking aerial grid.
    Grid,
    /// Cameras on a circle looking at a compact central object.
    Orbit,
    /// Cameras on a closed loop looking outward at a surrounding wall.
    Loop,
    /// Cameras driving the streets of a block grid, looking at facades.
    CityBlocks,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Grid => "grid",
            Layout::Orbit => "orbit",
            Layout::Loop => "loop",
            Layout::CityBlocks => "cityBlocks",
        })
    }
}

impl FromStr for Layout {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, SceneError> {
        match s.to_ascii_lowercase().as_str() {
            "grid" => Ok(Layout::Grid),
            "orbit" => Ok(Layout::Orbit),
            "loop" => Ok(Layout::Loop),
            "cityblocks" | "city-blocks" | "city" => Ok(Layout::CityBlocks),
            other => Err(SceneError::Config(format!("unknown layout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SyntheticConfig {
    pub layout: Layout,
    pub num_cameras: usize,
    pub num_points: usize,
    pub pixel_sigma: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    /// Camera pairs sharing fewer points than this produce no match edge.
    pub min_correspondences: usize,
}

impl SyntheticConfig {
    pub fn new(layout: Layout, num_cameras: usize, num_points: usize) -> Self {
        Self {
            layout,
            num_cameras,
            num_points,
            pixel_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 0,
            min_correspondences: 12,
        }
    }

    pub fn with_noise(mut self, pixel_sigma: f64, outlier_fraction: f64) -> Self {
        self.pixel_sigma = pixel_sigma;
        self.outlier_fraction = outlier_fraction;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_cameras < 2 {
            return Err(SceneError::TooFewCameras(self.num_cameras));
        }
        let min = match self.layout {
            Layout::Orbit => 2,
            Layout::Loop => 3,
            Layout::Grid => 4,
            Layout::CityBlocks => 8,
        };
        if self.num_cameras < min {
            return Err(SceneError::Config(format!(
                "layout {} needs at least {min} cameras, got {}",
                self.layout, self.num_cameras
            )));
        }
        if !(self.pixel_sigma >= 0.0) || !self.pixel_sigma.is_finite() {
            return Err(SceneError::Config(format!(
                "pixel sigma must be >= 0, got {}",
                self.pixel_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(SceneError::Config(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.min_correspondences == 0 {
            return Err(SceneError::Config("min_correspondences must be >= 1".into()));
        }
        Ok(())
    }
}

/// One feature detected in one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    /// Ground-truth 3D point, `None` for injected outlier features.
    pub point: Option<usize>,
    pub pixel: Point2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    /// Per point, the `(camera, feature index)` pairs observing it, sorted by camera.
    pub visibility: Vec<Vec<(CameraId, u32)>>,
    /// Per camera, its features indexed by feature index.
    pub features: Vec<Vec<Feature>>,
}

impl SyntheticScene {
    pub fn intrinsics(&self) -> Vec<Intrinsics> {
        self.cameras.iter().map(|c| c.intrinsics).collect()
    }

    /// Largest distance between two camera centers.
    pub fn diameter(&self) -> f64 {
        let centers: Vec<_> = self.poses.iter().map(|p| p.center).collect();
        crate::evaluation::diameter(&centers)
    }

    /// Ground-truth point id of a feature, if it is an inlier feature.
    pub fn point_of(&self, camera: CameraId, feature: u32) -> Option<usize> {
        self.features[camera].get(feature as usize).and_then(|f| f.point)
    }
}

struct Placement {
    poses: Vec<Pose>,
    intrinsics: Intrinsics,
    max_depth: f64,
}

const IMAGE_W: u32 = 640;
const IMAGE_H: u32 = 480;
const FOCAL: f64 = 500.0;
// Fixed stream for layouts so that the camera rig does not depend on the seed.
const LAYOUT_STREAM: u64 = 0x6c61_796f_7574;

fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        focal: FOCAL,
        cx: IMAGE_W as f64 / 2.0,
        cy: IMAGE_H as f64 / 2.0,
        width: IMAGE_W,
        height: IMAGE_H,
    }
}

fn loop_radius(n: usize) -> f64 {
    (n as f64 * 0.35 / std::f64::consts::TAU).max(2.0)
}

fn place_cameras(layout: Layout, n: usize) -> Placement {
    let intrinsics = default_intrinsics();
    let up = Vector3::z();
    match layout {
        Layout::Orbit => {
            let poses = (0..n)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / n as f64;
                    let c = Vector3::new(8.0 * a.cos(), 8.0 * a.sin(), 1.5 + 0.5 * (3.0 * a).sin());
                    Pose::look_at(c, Vector3::zeros(), -up)
                })
                .collect();
            Placement {
                poses,
                intrinsics,
                max_depth: 20.0,
            }
        }
        Layout::Loop => {
            let r = loop_radius(n);
            let poses = (0..n)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / n as f64;
                    let c = Vector3::new(r * a.cos(), r * a.sin(), 0.2 * (2.0 * a).sin());
                    let target = c + Vector3::new(a.cos(), a.sin(), 0.0);
                    Pose::look_at(c, target, -up)
                })
                .collect();
            Placement {
                poses,
                intrinsics,
                max_depth: 12.0,
            }
        }
        Layout::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(LAYOUT_STREAM ^ n as u64);
            let poses = (0..n)
                .map(|k| {
                    let (row, col) = (k / cols, k % cols);
                    let c = Vector3::new(
                        col as f64 * 2.0 + rng.random_range(-0.2..0.2),
                        row as f64 * 2.0 + rng.random_range(-0.2..0.2),
                        10.0 + rng.random_range(-0.3..0.3),
                    );
                    let target = Vector3::new(c.x + rng.random_range(-1.0..1.0), c.y + rng.random_range(-1.0..1.0), 0.0);
                    Pose::look_at(c, target, Vector3::y())
                })
                .collect();
            Placement {
                poses,
                intrinsics,
                max_depth: 30.0,
            }
        }
        Layout::CityBlocks => {
            let streets = city_streets(n);
            let total: f64 = streets.iter().map(|(a, b)| (b - a).norm()).sum();
            let step = total / n as f64;
            let mut poses = Vec::with_capacity(n);
            let mut offset = 0.5 * step;
            for (a, b) in &streets {
                let len = (b - a).norm();
                let dir = (b - a) / len;
                while offset < len && poses.len() < n {
                    let pos = a + dir * offset;
                    let c = Vector3::new(pos.x, pos.y, 1.6);
                    // look left of the travel direction, slightly forward
                    let left = Vector3::new(-dir.y, dir.x, 0.0);
                    let target = c + left + 0.3 * Vector3::new(dir.x, dir.y, 0.0);
                    poses.push(Pose::look_at(c, target, -up));
                    offset += step;
                }
                offset -= len;
            }
            while poses.len() < n {
                let last = *poses.last().expect("at least one street camera");
                poses.push(last);
            }
            Placement {
                poses,
                intrinsics,
                max_depth: 14.0,
            }
        }
    }
}

const BLOCK: f64 = 10.0;
const STREET: f64 = 4.0;

fn city_blocks_per_side(n: usize) -> usize {
    ((n as f64 / 40.0).sqrt().ceil() as usize).clamp(1, 6)
}

/// Street centerlines, each traversed in both directions so that both
/// facades are seen.
fn city_streets(n: usize) -> Vec<(nalgebra::Vector2<f64>, nalgebra::Vector2<f64>)> {
    use nalgebra::Vector2;
    let g = city_blocks_per_side(n);
    let pitch = BLOCK + STREET;
    let extent = g as f64 * pitch;
    let mut streets = Vec::new();
    for k in 0..=g {
        let s = k as f64 * pitch;
        let (a, b) = (Vector2::new(s, 0.0), Vector2::new(s, extent));
        streets.push((a, b));
        streets.push((b, a));
    }
    for k in 0..=g {
        let s = k as f64 * pitch;
        let (a, b) = (Vector2::new(0.0, s), Vector2::new(extent, s));
        streets.push((a, b));
        streets.push((b, a));
    }
    streets
}

/// Samples a surface point and its outward normal (if the surface is one-sided).
fn sample_point(layout: Layout, n: usize, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Option<Vector3<f64>>) {
    match layout {
        Layout::Orbit => loop {
            let p = Vector3::new(
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
            );
            if p.norm() <= 2.5 {
                return (p, None);
            }
        },
        Layout::Loop => {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let r = loop_radius(n) + 4.0 + rng.random_range(-1.5..1.5);
            let p = Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(-2.0..2.0));
            (p, Some(-Vector3::new(a.cos(), a.sin(), 0.0)))
        }
        Layout::Grid => {
            let cols = (n as f64).sqrt().ceil();
            let rows = (n as f64 / cols).ceil();
            let p = Vector3::new(
                rng.random_range(-6.0..cols * 2.0 + 4.0),
                rng.random_range(-6.0..rows * 2.0 + 4.0),
                rng.random_range(-1.0..1.0),
            );
            (p, None)
        }
        Layout::CityBlocks => {
            let g = city_blocks_per_side(n);
            let pitch = BLOCK + STREET;
            let bx = rng.random_range(0..g) as f64;
            let by = rng.random_range(0..g) as f64;
            let x0 = bx * pitch + STREET / 2.0;
            let y0 = by * pitch + STREET / 2.0;
            let t = rng.random_range(0.0..BLOCK);
            let z = rng.random_range(0.0..5.0);
            let inset = rng.random_range(0.0..0.8);
            let (p, normal) = match rng.random_range(0..4) {
                0 => (Vector3::new(x0 + t, y0 + inset, z), -Vector3::y()),
                1 => (Vector3::new(x0 + t, y0 + BLOCK - inset, z), Vector3::y()),
                2 => (Vector3::new(x0 + inset, y0 + t, z), -Vector3::x()),
                _ => (Vector3::new(x0 + BLOCK - inset, y0 + t, z), Vector3::x()),
            };
            (p, Some(normal))
        }
    }
}

/// Generates a ground-truth scene and its verified pairwise matches.
pub fn generate_synthetic_scene(config: &SyntheticConfig) -> Result<(SyntheticScene, Vec<MatchEdge>), SceneError> {
    config.validate()?;
    let n = config.num_cameras;
    let placement = place_cameras(config.layout, n);
    let intr = placement.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Sample points until the requested number is visible in at least two cameras.
    let mut points = Vec::with_capacity(config.num_points);
    let mut visibility: Vec<Vec<(CameraId, Point2<f64>)>> = Vec::with_capacity(config.num_points);
    let max_attempts = config.num_points.saturating_mul(200).max(1000);
    let mut attempts = 0;
    while points.len() < config.num_points && attempts < max_attempts {
        attempts += 1;
        let (p, normal) = sample_point(config.layout, n, &mut rng);
        let mut seen = Vec::new();
        for (cam, pose) in placement.poses.iter().enumerate() {
            if let Some(normal) = normal {
                if normal.dot(&(pose.center - p)) <= 0.0 {
                    continue;
                }
            }
            let depth = pose.to_camera(&p).z;
            if depth < 0.5 || depth > placement.max_depth {
                continue;
            }
            if let Ok(px) = project_point(pose, &intr, &p) {
                if intr.contains(&px) {
                    seen.push((cam, px));
                }
            }
        }
        if seen.len() >= 2 {
            points.push(p);
            visibility.push(seen);
        }
    }
    if points.len() < config.num_points {
        return Err(SceneError::Config(format!(
            "layout {} with {} cameras could only place {} of {} points",
            config.layout,
            n,
            points.len(),
            config.num_points
        )));
    }

    // Noisy features, one per (camera, point), indexed in point order.
    let noise = Normal::new(0.0, config.pixel_sigma.max(0.0)).map_err(|e| SceneError::Config(e.to_string()))?;
    let mut features: Vec<Vec<Feature>> = vec![Vec::new(); n];
    let mut vis_features: Vec<Vec<(CameraId, u32)>> = Vec::with_capacity(points.len());
    for (pid, seen) in visibility.iter().enumerate() {
        let mut list = Vec::with_capacity(seen.len());
        for &(cam, px) in seen {
            let pixel = if config.pixel_sigma > 0.0 {
                Point2::new(px.x + noise.sample(&mut rng), px.y + noise.sample(&mut rng))
            } else {
                px
            };
            let idx = features[cam].len() as u32;
            features[cam].push(Feature {
                point: Some(pid),
                pixel,
            });
            list.push((cam, idx));
        }
        vis_features.push(list);
    }

    // Pairwise correspondences from shared points.
    let mut shared: BTreeMap<(CameraId, CameraId), Vec<(u32, u32)>> = BTreeMap::new();
    for list in &vis_features {
        for a in 0..list.len() {
            for b in a + 1..list.len() {
                let (ci, fi) = list[a];
                let (cj, fj) = list[b];
                shared.entry((ci, cj)).or_default().push((fi, fj));
            }
        }
    }
    let mut matches = Vec::new();
    for ((i, j), pairs) in shared {
        if pairs.len() < config.min_correspondences {
            continue;
        }
        let num_outliers = (config.outlier_fraction * pairs.len() as f64).round() as usize;
        let mut outlier_slots = vec![false; pairs.len()];
        for slot in rand::seq::index::sample(&mut rng, pairs.len(), num_outliers) {
            outlier_slots[slot] = true;
        }
        let mut correspondences = Vec::with_capacity(pairs.len());
        for ((fi, fj), is_outlier) in pairs.into_iter().zip(outlier_slots) {
            let c = if is_outlier {
                // a false match between two clutter features
                let mut clutter = |cam: CameraId| {
                    let pixel = Point2::new(
                        rng.random_range(0.0..intr.width as f64),
                        rng.random_range(0.0..intr.height as f64),
                    );
                    let idx = features[cam].len() as u32;
                    features[cam].push(Feature { point: None, pixel });
                    (idx, pixel)
                };
                let (feature_i, point_i) = clutter(i);
                let (feature_j, point_j) = clutter(j);
                Correspondence {
                    feature_i,
                    point_i,
                    feature_j,
                    point_j,
                }
            } else {
                Correspondence {
                    feature_i: fi,
                    point_i: features[i][fi as usize].pixel,
                    feature_j: fj,
                    point_j: features[j][fj as usize].pixel,
                }
            };
            correspondences.push(c);
        }
        matches.push(MatchEdge::new(i, j, correspondences));
    }

    let cameras = (0..n)
        .map(|id| Camera {
            id,
            intrinsics: intr,
        })
        .collect();
    let scene = SyntheticScene {
        config: config.clone(),
        cameras,
        poses: placement.poses,
        points,
        visibility: vis_features,
        features,
    };
    Ok((scene, matches))
}

/// Random connected camera graph resembling an SfM view graph: cameras scattered
/// in the unit square, each linked to its `k` nearest neighbours with weights
/// decaying with distance.
pub fn random_camera_graph(num_cameras: usize, k: usize, seed: u64) -> Result<CameraGraph, SceneError> {
    if num_cameras < 2 {
        return Err(SceneError::TooFewCameras(num_cameras));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<(f64, f64)> = (0..num_cameras)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let scale = (1.0 / num_cameras as f64).sqrt();
    let dist = |a: usize, b: usize| ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();
    let weight = |d: f64, rng: &mut ChaCha8Rng| -> u64 {
        let base = 400.0 * (-d / (2.0 * scale)).exp();
        (base * rng.random_range(0.5..1.5)).round().max(1.0) as u64
    };
    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for a in 0..num_cameras {
        let mut order: Vec<usize> = (0..num_cameras).filter(|&b| b != a).collect();
        order.sort_by(|&x, &y| dist(a, x).total_cmp(&dist(a, y)).then(x.cmp(&y)));
        for &b in order.iter().take(k.min(num_cameras - 1)) {
            let key = (a.min(b), a.max(b));
            if !edges.contains_key(&key) {
                let w = weight(dist(a, b), &mut rng);
                edges.insert(key, w);
            }
        }
    }
    // Join components through their closest pair of cameras.
    loop {
        let g = CameraGraph::from_weighted_edges(num_cameras, edges.iter().map(|(&(i, j), &w)| (i, j, w)))?;
        let comps = g.connected_components();
        if comps.len() == 1 {
            return Ok(g);
        }
        let first = &comps[0];
        let mut best = (f64::INFINITY, 0, 0);
        for other in &comps[1..] {
            for &a in first {
                for &b in other {
                    let d = dist(a, b);
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
        }
        let w = weight(best.0, &mut rng);
        edges.insert((best.1.min(best.2), best.1.max(best.2)), w);
    }
}
