use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csfm_core::evaluation::format_report;
use csfm_core::pipeline::{parse_override, stage_status, Pipeline, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "csfm", version, about = "Cluster-parallel structure from motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Args)]
struct Options {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "CSFM_WORKERS")]
    workers: Option<usize>,
    /// Skip stages whose artifacts are up to date.
    #[arg(long, global = true)]
    resume: bool,
    /// Match-graph file to use instead of a synthetic scene.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    ground_truth: Option<PathBuf>,
    /// Synthetic layout: grid, orbit, loop or city-blocks.
    #[arg(long, global = true)]
    layout: Option<String>,
    #[arg(long, global = true)]
    cameras: Option<usize>,
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Pixel noise standard deviation of the synthetic scene.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    outliers: Option<f64>,
    #[arg(long, global = true)]
    max_cluster_size: Option<usize>,
    #[arg(long, global = true)]
    completeness_ratio: Option<f64>,
    /// Bundle adjustment consensus rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Any configuration key, e.g. `--set localSfm.baEvery=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic scene, or load the `--input` match graph.
    Synth,
    Cluster,
    Tracks,
    LocalSfm,
    Average,
    Triangulate,
    Ba,
    Evaluate,
    /// All stages in order.
    Run,
    /// Artifact presence and stale flags of the output directory.
    Status,
}

impl Options {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, PipelineError> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: toml::Value| out.push((k.to_string(), v));
        let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        if let Some(v) = &self.output {
            put("output", path(v));
        }
        if let Some(v) = self.seed {
            put("seed", toml::Value::Integer(int(v)?));
        }
        if let Some(v) = self.workers {
            put("workers", toml::Value::Integer(int(v as u64)?));
        }
        if let Some(v) = &self.input {
            put("input", path(v));
        }
        if let Some(v) = &self.ground_truth {
            put("groundTruth", path(v));
        }
        if let Some(v) = &self.layout {
            let layout: csfm_core::scene::Layout = v.parse().map_err(|e: csfm_core::scene::SceneError| PipelineError::Config(e.to_string()))?;
            put("synth.layout", toml::Value::String(layout.to_string()));
        }
        if let Some(v) = self.cameras {
            put("synth.cameras", toml::Value::Integer(int(v as u64)?));
        }
        if let Some(v) = self.points {
            put("synth.points", toml::Value::Integer(int(v as u64)?));
        }
        if let Some(v) = self.sigma {
            put("synth.pixelSigma", toml::Value::Float(v));
        }
        if let Some(v) = self.outliers {
            put("synth.outlierFraction", toml::Value::Float(v));
        }
        if let Some(v) = self.max_cluster_size {
            put("clustering.maxClusterSize", toml::Value::Integer(int(v as u64)?));
        }
        if let Some(v) = self.completeness_ratio {
            put("clustering.completenessRatio", toml::Value::Float(v));
        }
        if let Some(v) = self.rounds {
            put("bundle.rounds", toml::Value::Integer(int(v as u64)?));
        }
        for s in &self.set {
            out.push(parse_override(s)?);
        }
        Ok(out)
    }

    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        PipelineConfig::from_toml(text.as_deref(), &self.overrides()?)
    }
}

fn int(v: u64) -> Result<i64, PipelineError> {
    i64::try_from(v).map_err(|_| PipelineError::Config(format!("{v} is out of range")))
}

fn stages(cmd: Command) -> Vec<Stage> {
    match cmd {
        Command::Synth => vec![Stage::Synth],
        Command::Cluster => vec![Stage::Cluster],
        Command::Tracks => vec![Stage::Tracks],
        Command::LocalSfm => vec![Stage::LocalSfm],
        Command::Average => vec![Stage::Average],
        Command::Triangulate => vec![Stage::Triangulate],
        Command::Ba => vec![Stage::Ba],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Run | Command::Status => Stage::ALL.to_vec(),
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = cli.opts.load()?;
    if let Command::Status = cli.command {
        println!("{:<12} {:<8} {:<9} {:<16} {}", "stage", "present", "state", "hash", "timestamp");
        for s in stage_status(&config.output)? {
            let hash = s.hash.as_deref().map_or("-".to_string(), |h| h[..16].to_string());
            let ts = s.timestamp.map_or("-".to_string(), |t| t.to_string());
            println!("{:<12} {:<8} {:<9} {:<16} {}", s.stage.name(), s.present, format!("{:?}", s.state).to_lowercase(), hash, ts);
        }
        return Ok(());
    }
    let pipeline = Pipeline::new(config, cli.opts.resume)?;
    let summary = pipeline.run(&stages(cli.command))?;
    for s in &summary.skipped {
        println!("{s}: up to date");
    }
    for s in &summary.executed {
        println!("{s}: done");
    }
    if let Some(r) = &summary.report {
        println!("after motion averaging:\n{}", format_report(&r.motion_averaging));
        println!("after bundle adjustment:\n{}", format_report(&r.bundle_adjusted));
        println!("mean reprojection error: {:.4} px", r.mean_reprojection_error);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
