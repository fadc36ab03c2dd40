use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Fetch,
    Filter,
    Classify,
    Fuse,
    Eval,
    Map,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Fetch,
        Stage::Filter,
        Stage::Classify,
        Stage::Fuse,
        Stage::Eval,
        Stage::Map,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Fetch => "fetch",
            Stage::Filter => "filter",
            Stage::Classify => "classify",
            Stage::Fuse => "fuse",
            Stage::Eval => "eval",
            Stage::Map => "map",
        }
    }

    pub fn upstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().take_while(move |&s| s != self)
    }

    pub fn downstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().skip_while(move |&s| s != self).skip(1)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    #[default]
    Pending,
    Running,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageState,
    /// Output file (relative to the output directory) to sha256 hex digest.
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific counters.
    pub summary: Option<serde_json::Value>,
    /// Digest of the configuration the stage ran with.
    #[serde(default)]
    pub settings: Option<String>,
}

/// `manifest.json`: run identity, config snapshot and per-stage progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config: PipelineConfig) -> Self {
        RunManifest {
            run_id: config.run_id(),
            config,
            stages: Stage::ALL.iter().map(|&s| (s, StageRecord::default())).collect(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        &self.stages[&stage]
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.entry(stage).or_default()
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage(stage).status == StageState::Done
    }

    /// Resets `stage` and everything after it.
    pub fn reset_from(&mut self, stage: Stage) {
        for s in std::iter::once(stage).chain(stage.downstream()) {
            *self.stage_mut(s) = StageRecord::default();
        }
    }

    /// Checks that every recorded output of `stage` exists with its digest.
    pub fn outputs_intact(&self, stage: Stage, out_dir: &Path) -> bool {
        self.stage(stage)
            .outputs
            .iter()
            .all(|(file, digest)| file_digest(&out_dir.join(file)).is_ok_and(|d| &d == digest))
    }
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order() {
        assert_eq!(Stage::Filter.upstream().collect::<Vec<_>>(), vec![Stage::Ingest, Stage::Fetch]);
        assert_eq!(Stage::Eval.downstream().collect::<Vec<_>>(), vec![Stage::Map]);
        assert_eq!(Stage::Ingest.upstream().count(), 0);
        assert_eq!("fuse".parse::<Stage>(), Ok(Stage::Fuse));
    }

    #[test]
    fn reset_clears_downstream() {
        let mut m = RunManifest::new(PipelineConfig::default());
        for s in Stage::ALL {
            m.stage_mut(s).status = StageState::Done;
        }
        m.reset_from(Stage::Fuse);
        assert!(m.is_done(Stage::Classify));
        assert!(!m.is_done(Stage::Fuse));
        assert!(!m.is_done(Stage::Map));
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest::new(PipelineConfig::default());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains(r#""ingest":{"status":"pending""#));
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
