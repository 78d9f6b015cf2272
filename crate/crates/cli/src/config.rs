//! The run configuration file shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use mminr::model::{ModelConfig, Preset};
use mminr::synth::manifest::{CorpusConfig, MANIFEST_FILE};
use mminr::synth::DegradationSpec;
use mminr::train::losses::LossWeights;
use mminr::train::{Setup, TrainConfig};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding the corpus volumes and `manifest.json`.
    pub corpus_dir: PathBuf,
    /// Checkpoints and `metrics.csv` of `train`; root of `ablate` runs.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus_dir: "corpus".into(), run_dir: "runs/default".into() }
    }
}

/// Everything a command needs. Missing sections take their defaults;
/// unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `weights.toggles` with one of the four ablation rows.
    pub preset: Option<Preset>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// The training setup, with the preset applied and checkpoints going to
    /// `paths.run_dir`.
    pub fn setup(&self) -> Setup {
        let mut weights = self.weights;
        if let Some(p) = self.preset {
            weights.toggles = p.toggles();
        }
        let mut train = self.train.clone();
        train.checkpoint_dir = Some(self.paths.run_dir.clone());
        Setup { model: self.model.clone(), weights, train, degradation: self.degradation.clone() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.corpus_dir.join(MANIFEST_FILE)
    }
}

/// A problem with how the tool was invoked; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn schema_json<T: JsonSchema>() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(T)).expect("schema serializes") + "\n"
}
