//! Run configuration, validation, hashing and the provenance listing.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::detector::{DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_GAMMA};
use crate::ingest::DEFAULT_SEQ_LEN;
use crate::llm::{DEFAULT_IN_FLIGHT, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::nn::{EncoderConfig, TrainConfig};
use crate::sps::SpsMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Stage one routes, ID samples to the classifier, OOD samples to the LLM.
    Adaptive,
    /// Stage one still runs but every sample is labeled by the ID classifier.
    AllId,
    /// Stage one still runs but every sample goes to the LLM with its route in the prompt.
    AllLlm,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 3] = [RoutingMode::Adaptive, RoutingMode::AllId, RoutingMode::AllLlm];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoutingMode::Adaptive => "adaptive",
            RoutingMode::AllId => "all-id",
            RoutingMode::AllLlm => "all-llm",
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown routing mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Answers with the gold label; evaluation only.
    MockOracle,
    MockKeyword,
    Remote,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::MockOracle, BackendKind::MockKeyword, BackendKind::Remote];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::MockOracle => "mock-oracle",
            BackendKind::MockKeyword => "mock-keyword",
            BackendKind::Remote => "remote",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown backend {s:?}"))
    }
}

/// Everything a run depends on. Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset JSONL; `None` generates the shipped synthetic corpus.
    pub dataset: Option<PathBuf>,
    pub synthetic_per_class: usize,
    /// Seed of the synthetic corpus, kept apart from `seed` so repeated runs share data.
    pub synthetic_seed: u64,
    pub seed: u64,
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub seq_len: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub sps_mode: SpsMode,
    pub routing_mode: RoutingMode,
    pub backend: BackendKind,
    pub detector_epochs: usize,
    pub classifier_epochs: usize,
    pub detector_lr: f64,
    pub classifier_lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub in_flight: usize,
    /// Directory with `strict.txt`, `complete.txt`, `extended.txt`; `None` uses the shipped set.
    pub templates: Option<PathBuf>,
    /// JSON keyword table for the keyword mock; `None` uses the shipped table.
    pub keyword_table: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic_per_class: 500,
            synthetic_seed: 42,
            seed: 42,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            seq_len: DEFAULT_SEQ_LEN,
            d: 64,
            layers: 4,
            heads: 4,
            sps_mode: SpsMode::Strict,
            routing_mode: RoutingMode::Adaptive,
            backend: BackendKind::MockOracle,
            detector_epochs: 20,
            classifier_epochs: 30,
            detector_lr: 2e-5,
            classifier_lr: 2e-5,
            batch_size: 32,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            in_flight: DEFAULT_IN_FLIGHT,
            templates: None,
            keyword_table: None,
        }
    }
}

/// Where a default value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Published configuration of the method.
    Published,
    /// Chosen for this implementation.
    Artifact,
    /// Supplied by the user or environment.
    Run,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Published => "published",
            Provenance::Artifact => "artifact",
            Provenance::Run => "run",
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.delta.is_finite() {
            return fail(format!("delta {} is not finite", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.seq_len == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 {
            return fail("seq_len, d, layers and heads must be positive".into());
        }
        if self.d % self.heads != 0 {
            return fail(format!("d {} is not divisible by heads {}", self.d, self.heads));
        }
        if self.batch_size == 0 || self.in_flight == 0 {
            return fail("batch_size and in_flight must be positive".into());
        }
        if !(self.detector_lr > 0.0 && self.classifier_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.temperature >= 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("temperature {} / top_p {} out of range", self.temperature, self.top_p));
        }
        if self.dataset.is_none() && self.synthetic_per_class == 0 {
            return fail("synthetic_per_class must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.d, self.layers, self.heads, self.seq_len)
    }

    pub fn detector_train(&self) -> TrainConfig {
        TrainConfig { epochs: self.detector_epochs, learning_rate: self.detector_lr, batch_size: self.batch_size, seed: self.seed }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.classifier_epochs,
            learning_rate: self.classifier_lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// First 12 hex digits of the SHA-256 of the config JSON with the seed zeroed.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(&RunConfig { seed: 0, ..self.clone() }).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))[..12].to_string()
    }

    pub fn run_dir_name(&self) -> String {
        format!("run-{}-s{}", self.config_hash(), self.seed)
    }

    /// `(field, value, provenance)` for every field; values differing from the
    /// default are reported as `run`.
    pub fn provenance(&self) -> Vec<(&'static str, serde_json::Value, Provenance)> {
        use Provenance::{Artifact, Published};
        let current = serde_json::to_value(self).expect("config serializes");
        let default = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let source = |field: &str| match field {
            "seed" | "alpha" | "delta" | "detector_epochs" | "classifier_epochs" | "detector_lr" | "classifier_lr"
            | "temperature" | "top_p" | "sps_mode" => Published,
            _ => Artifact,
        };
        FIELDS
            .iter()
            .map(|&f| {
                let tag = if current[f] == default[f] { source(f) } else { Provenance::Run };
                (f, current[f].clone(), tag)
            })
            .collect()
    }

    /// The effective config as pretty JSON with a provenance map.
    pub fn provenance_json(&self) -> serde_json::Value {
        let mut config = serde_json::Map::new();
        let mut tags = serde_json::Map::new();
        for (f, v, p) in self.provenance() {
            config.insert(f.into(), v);
            tags.insert(f.into(), p.as_str().into());
        }
        serde_json::json!({ "config": config, "provenance": tags })
    }
}

const FIELDS: [&str; 24] = [
    "dataset",
    "synthetic_per_class",
    "synthetic_seed",
    "seed",
    "alpha",
    "delta",
    "gamma",
    "seq_len",
    "d",
    "layers",
    "heads",
    "sps_mode",
    "routing_mode",
    "backend",
    "detector_epochs",
    "classifier_epochs",
    "detector_lr",
    "classifier_lr",
    "batch_size",
    "temperature",
    "top_p",
    "in_flight",
    "templates",
    "keyword_table",
];
