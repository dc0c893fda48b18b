//! Packet capture import, byte-level tokenization, datasets and splits.

pub mod dataset;
pub mod packet;
pub mod pcap;
pub mod split;
pub mod synthetic;
pub mod tokenize;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{load_dataset, load_dataset_with_labels, write_dataset};
pub use packet::{HeaderSummary, LinkType, PacketRecord, Transport};
pub use pcap::{parse_pcap, parse_pcap_bytes, ParsedCapture};
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tokenize::{anonymize, tokenize_packet};

/// Token used to right-pad sequences shorter than the configured length.
pub const PAD_TOKEN: u16 = 256;
/// Byte values plus the pad token.
pub const VOCAB_SIZE: usize = 257;
pub const DEFAULT_SEQ_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("malformed capture: {0}")]
    MalformedCapture(String),
    #[error("unparseable packet: {0}")]
    UnparseablePacket(String),
    #[error("schema violation on line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("class {label:?} has {count} samples, fewer than the {needed} splits it must populate")]
    InsufficientSamples { label: String, count: usize, needed: usize },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Pcap,
    Jsonl,
    Synthetic,
}

/// One packet as a fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    pub id: String,
    pub tokens: Vec<u16>,
    pub label: Option<String>,
    pub origin: Origin,
}

impl TrafficSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens that carry packet bytes, i.e. everything but padding.
    pub fn byte_tokens(&self) -> impl Iterator<Item = u8> + '_ {
        self.tokens.iter().filter(|&&t| t != PAD_TOKEN).map(|&t| t as u8)
    }

    /// Re-parses the packet headers from the (anonymized) token bytes.
    pub fn to_record(&self) -> Result<PacketRecord, IngestError> {
        let bytes: Vec<u8> = self.tokens.iter().take_while(|&&t| t != PAD_TOKEN).map(|&t| t as u8).collect();
        PacketRecord::from_ip_bytes(0.0, bytes)
    }
}

/// Known (ID), unknown (OOD) and cross-dataset label sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub id_labels: Vec<String>,
    pub ood_labels: Vec<String>,
    #[serde(default)]
    pub extended_labels: Vec<String>,
}

impl LabelSpace {
    pub fn new(id_labels: Vec<String>, ood_labels: Vec<String>) -> Self {
        Self { id_labels, ood_labels, extended_labels: Vec::new() }
    }

    pub fn with_extended(mut self, extended: Vec<String>) -> Self {
        self.extended_labels = extended;
        self
    }

    pub fn is_id(&self, label: &str) -> bool {
        self.id_labels.iter().any(|l| l == label)
    }

    pub fn is_ood(&self, label: &str) -> bool {
        self.ood_labels.iter().any(|l| l == label)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(l) = self.id_labels.iter().find(|l| self.is_ood(l)) {
            return Err(format!("label {l:?} is both ID and OOD"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<TrafficSample>,
    pub label_space: LabelSpace,
    pub assignments: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn split_of(&self, sample: &TrafficSample) -> Option<Split> {
        self.assignments.get(&sample.id).copied()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrafficSample> {
        self.samples.iter().filter(move |s| self.split_of(s) == Some(split))
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Samples of `split` whose gold label is in the ID set.
    pub fn id_samples(&self, split: Split) -> impl Iterator<Item = &TrafficSample> {
        self.split(split)
            .filter(|s| s.label.as_deref().is_some_and(|l| self.label_space.is_id(l)))
    }

    pub fn ood_samples(&self, split: Split) -> impl Iterator<Item = &TrafficSample> {
        self.split(split)
            .filter(|s| s.label.as_deref().is_some_and(|l| self.label_space.is_ood(l)))
    }

    pub fn seq_len(&self) -> Option<usize> {
        self.samples.first().map(TrafficSample::len)
    }
}
