//! Stage orchestration: each stage reads its upstream artifacts from the output
//! directory, writes its own, and records the hashes of both in a
//! `<stage>.meta.json` file. The recorded hashes form a chain used for resume
//! and stale detection.

mod config;
mod stages;

pub use config::{parse_override, PipelineConfig, SynthSection};
pub use stages::{EvaluationReport, LocalSfmArtifact};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::ClusteringError;
use crate::evaluation::EvaluationError;
use crate::motion_averaging::MotionError;
use crate::scene::SceneError;
use crate::tracks::TrackError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }

    fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ PipelineError::Stage { .. } => e,
            e => PipelineError::Stage { stage, source: Box::new(e) },
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SceneError> for PipelineError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Config(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ClusteringError> for PipelineError {
    fn from(e: ClusteringError) -> Self {
        match e {
            ClusteringError::Config(m) => PipelineError::Config(m),
            e @ ClusteringError::NonTermination { .. } => PipelineError::Numerical(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrackError> for PipelineError {
    fn from(e: TrackError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<MotionError> for PipelineError {
    fn from(e: MotionError) -> Self {
        match e {
            MotionError::Config(m) => PipelineError::Config(m),
            e @ (MotionError::DegenerateScale { .. } | MotionError::UnconstrainedCameras(_) | MotionError::UnconstrainedScales(_)) => {
                PipelineError::Numerical(e.to_string())
            }
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvaluationError> for PipelineError {
    fn from(e: EvaluationError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Cluster,
    Tracks,
    LocalSfm,
    Average,
    Triangulate,
    Ba,
    Evaluate,
}

pub const MATCH_GRAPH: &str = "match_graph.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const CLUSTERS: &str = "clusters.json";
pub const TRACKS: &str = "tracks.json";
pub const LOCAL_SFM: &str = "local_sfm.json";
pub const GLOBAL_MOTION: &str = "global_motion.json";
pub const POINTS: &str = "points.json";
pub const BA_POSES: &str = "poses.json";
pub const BA_POINTS: &str = "points_ba.json";
pub const BA_PLY: &str = "points.ply";
pub const BA_ROUNDS: &str = "ba_rounds.csv";
pub const REPORT: &str = "report.json";

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Cluster,
        Stage::Tracks,
        Stage::LocalSfm,
        Stage::Average,
        Stage::Triangulate,
        Stage::Ba,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cluster => "cluster",
            Stage::Tracks => "tracks",
            Stage::LocalSfm => "local-sfm",
            Stage::Average => "average",
            Stage::Triangulate => "triangulate",
            Stage::Ba => "ba",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[MATCH_GRAPH, GROUND_TRUTH],
            Stage::Cluster => &[CLUSTERS],
            Stage::Tracks => &[TRACKS],
            Stage::LocalSfm => &[LOCAL_SFM],
            Stage::Average => &[GLOBAL_MOTION],
            Stage::Triangulate => &[POINTS],
            Stage::Ba => &[BA_POSES, BA_POINTS, BA_PLY, BA_ROUNDS],
            Stage::Evaluate => &[REPORT],
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[],
            Stage::Cluster => &[MATCH_GRAPH],
            Stage::Tracks => &[MATCH_GRAPH, CLUSTERS],
            Stage::LocalSfm => &[MATCH_GRAPH, CLUSTERS, TRACKS],
            Stage::Average => &[LOCAL_SFM],
            Stage::Triangulate => &[MATCH_GRAPH, CLUSTERS, TRACKS, LOCAL_SFM, GLOBAL_MOTION],
            Stage::Ba => &[MATCH_GRAPH, CLUSTERS, POINTS, GLOBAL_MOTION],
            Stage::Evaluate => &[MATCH_GRAPH, GROUND_TRUTH, CLUSTERS, GLOBAL_MOTION, POINTS, BA_POSES, BA_POINTS],
        }
    }

    /// Stage producing an artifact.
    pub fn producer(file: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.outputs().contains(&file))
    }

    pub fn meta_file(self) -> String {
        format!("{}.meta.json", self.name())
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|&s| s == self).expect("listed") as u64
    }

    /// Seed of randomized work item `unit` of this stage.
    pub fn seed(self, global: u64, unit: u64) -> u64 {
        crate::derive_seed(global, (self.index() << 32) | unit)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StageMeta {
    pub stage: Stage,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, `None` if it does not exist.
pub fn file_hash(path: &Path) -> Result<Option<String>, PipelineError> {
    match fs::read(path) {
        Ok(b) => Ok(Some(sha256_hex(&b))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_meta(dir: &Path, stage: Stage) -> Result<Option<StageMeta>, PipelineError> {
    let path = dir.join(stage.meta_file());
    match fs::read(&path) {
        Ok(b) => Ok(serde_json::from_slice(&b).ok()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StageState {
    /// No output of the stage exists.
    Absent,
    /// Outputs match the record and every input matches its upstream output.
    Current,
    /// Outputs are missing or differ from the recorded hashes.
    Modified,
    /// An input changed since the stage ran, or an upstream stage is not current.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageStatus {
    pub stage: Stage,
    pub present: bool,
    /// Hash of the stage's first output.
    pub hash: Option<String>,
    pub timestamp: Option<u64>,
    pub state: StageState,
}

/// Artifact presence, hashes and stale flags for every stage of `dir`.
pub fn stage_status(dir: &Path) -> Result<Vec<StageStatus>, PipelineError> {
    fs::read_dir(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    let mut hashes: BTreeMap<&str, Option<String>> = BTreeMap::new();
    for s in Stage::ALL {
        for f in s.outputs() {
            hashes.insert(f, file_hash(&dir.join(f))?);
        }
    }
    let mut states: BTreeMap<Stage, StageState> = BTreeMap::new();
    let mut out = Vec::new();
    for s in Stage::ALL {
        let present = s.outputs().iter().all(|f| hashes[f].is_some());
        let any = s.outputs().iter().any(|f| hashes[f].is_some());
        let meta = read_meta(dir, s)?;
        let state = match &meta {
            _ if !any => StageState::Absent,
            None => StageState::Modified,
            Some(m) => {
                let outputs_ok = present && s.outputs().iter().all(|f| m.outputs.get(*f) == hashes[f].as_ref());
                let inputs_ok = s.inputs().iter().all(|f| m.inputs.get(*f).is_some() && m.inputs.get(*f) == hashes[f].as_ref());
                let upstream_ok = s
                    .inputs()
                    .iter()
                    .filter_map(|f| Stage::producer(f))
                    .all(|u| states.get(&u) == Some(&StageState::Current));
                if !outputs_ok {
                    StageState::Modified
                } else if !inputs_ok || !upstream_ok {
                    StageState::Stale
                } else {
                    StageState::Current
                }
            }
        };
        states.insert(s, state);
        out.push(StageStatus {
            stage: s,
            present,
            hash: hashes[s.outputs()[0]].clone(),
            timestamp: meta.map(|m| m.created_at),
            state,
        });
    }
    Ok(out)
}

/// Hashes of all artifacts present in `dir`, keyed by file name.
pub fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    for s in Stage::ALL {
        for f in s.outputs() {
            if let Some(h) = file_hash(&dir.join(f))? {
                out.insert(f.to_string(), h);
            }
        }
    }
    Ok(out)
}

/// Writes `bytes` next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub report: Option<EvaluationReport>,
}

pub struct Pipeline {
    config: PipelineConfig,
    dir: PathBuf,
    resume: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, resume: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        let dir = config.output.clone();
        Ok(Self { config, dir, resume })
    }

    pub fn output_dir(&self) -> &Path {
        &self.dir
    }

    /// Runs `stages` in pipeline order on a pool of the configured size.
    pub fn run(&self, stages: &[Stage]) -> Result<RunSummary, PipelineError> {
        let mut order = stages.to_vec();
        order.sort();
        order.dedup();
        fs::create_dir_all(&self.dir)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.worker_count())
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut summary = RunSummary::default();
        for stage in order {
            if self.resume && self.is_current(stage)? {
                info!("{stage}: up to date, skipped");
                summary.skipped.push(stage);
                continue;
            }
            info!("{stage}: running");
            let report = pool.install(|| self.execute(stage)).map_err(|e| e.in_stage(stage))?;
            if report.is_some() {
                summary.report = report;
            }
            summary.executed.push(stage);
        }
        Ok(summary)
    }

    fn is_current(&self, stage: Stage) -> Result<bool, PipelineError> {
        let status = stage_status(&self.dir)?;
        let st = status.iter().find(|s| s.stage == stage).expect("all stages listed");
        let meta = read_meta(&self.dir, stage)?;
        Ok(st.state == StageState::Current && meta.is_some_and(|m| m.config_hash == self.config_hash(stage)))
    }

    fn config_hash(&self, stage: Stage) -> String {
        let c = &self.config;
        let relevant = match stage {
            Stage::Synth => serde_json::json!({ "seed": c.seed, "input": c.input, "groundTruth": c.ground_truth, "synth": c.synth }),
            Stage::Cluster => serde_json::json!({ "seed": c.seed, "clustering": c.clustering }),
            Stage::Tracks => serde_json::json!({}),
            Stage::LocalSfm => serde_json::json!({ "seed": c.seed, "localSfm": c.local_sfm }),
            Stage::Average => serde_json::json!({ "motion": c.motion }),
            Stage::Triangulate => serde_json::json!({ "triangulation": c.triangulation }),
            Stage::Ba => serde_json::json!({ "bundle": c.bundle }),
            Stage::Evaluate => serde_json::json!({}),
        };
        sha256_hex(relevant.to_string().as_bytes())
    }

    fn execute(&self, stage: Stage) -> Result<Option<EvaluationReport>, PipelineError> {
        let mut inputs = BTreeMap::new();
        for f in stage.inputs() {
            let h = file_hash(&self.dir.join(f))?.ok_or_else(|| {
                let by = Stage::producer(f).map_or(String::new(), |s| format!("; run stage {s} first"));
                PipelineError::Data(format!("missing artifact {f}{by}"))
            })?;
            inputs.insert(f.to_string(), h);
        }
        let report = stages::run_stage(stage, &self.config, &self.dir)?;
        let mut outputs = BTreeMap::new();
        for f in stage.outputs() {
            let h = file_hash(&self.dir.join(f))?.ok_or_else(|| PipelineError::Data(format!("stage {stage} did not write {f}")))?;
            outputs.insert(f.to_string(), h);
        }
        let meta = StageMeta {
            stage,
            config_hash: self.config_hash(stage),
            inputs,
            outputs,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        write_atomic(&self.dir.join(stage.meta_file()), &serde_json::to_vec_pretty(&meta)?)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn every_input_has_an_earlier_producer() {
        for s in Stage::ALL {
            for f in s.inputs() {
                assert!(Stage::producer(f).unwrap() < s, "{s} reads {f}");
            }
        }
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(Stage::LocalSfm.seed(1, 0), Stage::Cluster.seed(1, 0));
        assert_ne!(Stage::LocalSfm.seed(1, 0), Stage::LocalSfm.seed(1, 1));
    }

    #[test]
    fn exit_codes() {
        let e = PipelineError::Numerical("x".into()).in_stage(Stage::Average);
        assert_eq!(e.exit_code(), 4);
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::Data("x".into()).exit_code(), 3);
    }
}
