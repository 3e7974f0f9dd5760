use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::clustering::ClusterConfig;
use crate::local_sfm::LocalSfmConfig;
use crate::motion_averaging::MotionConfig;
use crate::scene::{Layout, SyntheticConfig};
use crate::triangulation_ba::{BundleConfig, TriangulationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SynthSection {
    pub layout: Layout,
    pub cameras: usize,
    pub points: usize,
    pub pixel_sigma: f64,
    pub outlier_fraction: f64,
    pub min_correspondences: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            layout: Layout::Loop,
            cameras: 120,
            points: 6000,
            pixel_sigma: 0.5,
            outlier_fraction: 0.0,
            min_correspondences: 12,
        }
    }
}

impl SynthSection {
    pub fn to_config(&self, seed: u64) -> SyntheticConfig {
        let mut c = SyntheticConfig::new(self.layout, self.cameras, self.points)
            .with_noise(self.pixel_sigma, self.outlier_fraction)
            .with_seed(seed);
        c.min_correspondences = self.min_correspondences;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Match-graph file to load instead of generating a synthetic scene.
    pub input: Option<PathBuf>,
    /// Ground-truth poses for the evaluation of a loaded match graph.
    pub ground_truth: Option<PathBuf>,
    pub output: PathBuf,
    pub synth: SynthSection,
    pub clustering: ClusterConfig,
    pub local_sfm: LocalSfmConfig,
    pub motion: MotionConfig,
    pub triangulation: TriangulationConfig,
    pub bundle: BundleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            input: None,
            ground_truth: None,
            output: PathBuf::from("csfm_out"),
            synth: SynthSection::default(),
            clustering: ClusterConfig {
                max_cluster_size: 40,
                ..ClusterConfig::default()
            },
            local_sfm: LocalSfmConfig::default(),
            motion: MotionConfig::default(),
            triangulation: TriangulationConfig::default(),
            bundle: BundleConfig::default(),
        }
    }
}

/// Parses `key.path=value`; the value is read as a TOML value, falling back
/// to a plain string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), PipelineError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override '{s}' is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(PipelineError::Config(format!("override '{s}' has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), PipelineError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML document and applies `overrides` on top; overrides win.
    pub fn from_toml(text: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self, PipelineError> {
        // partial sections fall back to the pipeline defaults, not the module ones
        let mut table = toml::Table::try_from(Self::default()).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(t) = text {
            let file: toml::Table = toml::from_str(t).map_err(|e| PipelineError::Config(e.to_string()))?;
            merge(&mut table, file);
        }
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        if self.workers == Some(0) {
            return Err(cfg("workers must be >= 1".into()));
        }
        if self.input.is_none() {
            self.synth.to_config(self.seed).validate().map_err(|e| cfg(e.to_string()))?;
        }
        self.clustering.validate().map_err(|e| cfg(e.to_string()))?;
        self.local_sfm.validate().map_err(|e| cfg(e.to_string()))?;
        self.motion.validate().map_err(|e| cfg(e.to_string()))?;
        if self.triangulation.min_views < 2 {
            return Err(cfg(format!("triangulation needs min_views >= 2, got {}", self.triangulation.min_views)));
        }
        if !(self.triangulation.max_reprojection_px > 0.0) {
            return Err(cfg("triangulation reprojection threshold must be positive".into()));
        }
        if self.bundle.rounds == 0 || self.bundle.lm.max_iterations == 0 {
            return Err(cfg("bundle rounds and LM iterations must be >= 1".into()));
        }
        if !(self.bundle.rms_tolerance >= 0.0) {
            return Err(cfg("bundle RMS tolerance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}
