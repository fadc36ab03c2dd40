use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bic_core::pipeline::{Pipeline, PipelineConfig, RunManifest, Stage, StageOutcome, MANIFEST_FILE};
use bic_core::BoundingBox;
use clap::{Args, Parser, Subcommand};

/// Classify building functions from street-level imagery and OSM footprints.
#[derive(Debug, Parser)]
#[command(name = "bic", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration. Without it the snapshot in `<out>/manifest.json`
    /// is reused, falling back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse OSM building footprints.
    Ingest {
        #[arg(long)]
        osm: Option<PathBuf>,
        /// Keep buildings whose centroid lies in S,W,N,E.
        #[arg(long)]
        bbox: Option<BoundingBox>,
    },
    /// Download street-level images around each building.
    Fetch,
    /// Drop images whose scene is not building-related.
    Filter,
    /// Score kept images with the building classifier.
    Classify,
    /// Fuse per-image scores into building labels.
    Fuse,
    /// Score predictions against OSM labels.
    Eval {
        #[arg(long)]
        sample_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write GeoJSON maps.
    Map,
    /// Run every stage in order.
    Run {
        #[arg(long, required = true)]
        all: bool,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let out = common.out.clone().unwrap_or_else(|| PipelineConfig::default().paths.out_dir);
            snapshot(&out.join(MANIFEST_FILE))?.unwrap_or_default()
        }
    };
    if let Some(out) = &common.out {
        config.paths.out_dir = out.clone();
    }
    Ok(config)
}

fn snapshot(path: &Path) -> Result<Option<PipelineConfig>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(manifest.config))
}

fn report(stage: Stage, outcome: StageOutcome, pipeline: &Pipeline) {
    match outcome {
        StageOutcome::Skipped => println!("{stage}: up to date"),
        StageOutcome::Ran => match &pipeline.manifest().stage(stage).summary {
            Some(summary) => println!("{stage}: done {summary}"),
            None => println!("{stage}: done"),
        },
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = load_config(&cli.common)?;

    let stage = match cli.command {
        Command::Ingest { osm, bbox } => {
            if osm.is_some() {
                config.paths.osm = osm;
            }
            if bbox.is_some() {
                config.bbox = bbox;
            }
            if config.paths.osm.is_none() {
                bail!("ingest needs --osm or paths.osm in the configuration");
            }
            Some(Stage::Ingest)
        }
        Command::Fetch => Some(Stage::Fetch),
        Command::Filter => Some(Stage::Filter),
        Command::Classify => Some(Stage::Classify),
        Command::Fuse => Some(Stage::Fuse),
        Command::Eval { sample_n, seed } => {
            if sample_n.is_some() {
                config.eval.sample_n = sample_n;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            Some(Stage::Eval)
        }
        Command::Map => Some(Stage::Map),
        Command::Run { .. } => None,
    };

    let mut pipeline = Pipeline::open(config)?;
    match stage {
        Some(stage) => {
            let outcome = pipeline.run_stage(stage, cli.common.force)?;
            report(stage, outcome, &pipeline);
        }
        None => {
            for (stage, outcome) in pipeline.run_all(cli.common.force)? {
                report(stage, outcome, &pipeline);
            }
        }
    }
    println!("run {} in {}", pipeline.manifest().run_id, pipeline.out_dir().display());
    Ok(())
}
