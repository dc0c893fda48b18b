//! Closed-set classifier over the ID labels: softmax head on the encoder's
//! final embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TrafficSample;
use crate::nn::math::softmax;
use crate::nn::{encoder_forward, Checkpoint, Component, EncoderConfig, EncoderParams, LinearHead, NnError, ParamSet};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("classifier is not fitted: {0}")]
    NotFitted(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Tensor name prefix of the head weights.
pub const HEAD_PREFIX: &str = "classifier_head";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: LinearHead,
    /// Output order of the head; the ID label space.
    pub labels: Vec<String>,
}

/// A label with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub probability: f64,
}

impl ClassifierHead {
    fn check(&self, encoder: &EncoderParams) -> Result<(), ClassifierError> {
        if self.labels.is_empty() {
            return Err(ClassifierError::NotFitted("no labels".into()));
        }
        if self.linear.out_dim() != self.labels.len() || self.linear.in_dim() != encoder.config.d {
            return Err(ClassifierError::NotFitted(format!(
                "head is {}x{}, expected {}x{}",
                self.linear.out_dim(),
                self.linear.in_dim(),
                self.labels.len(),
                encoder.config.d
            )));
        }
        Ok(())
    }
}

/// Encoder and head together in one checkpoint.
pub fn to_checkpoint(encoder: &EncoderParams, head: &ClassifierHead) -> Checkpoint {
    let mut tensors: Vec<_> = encoder.tensors().into_iter().cloned().collect();
    tensors.extend(head.linear.tensors().into_iter().cloned());
    let metadata = serde_json::json!({ "encoder": encoder.config, "labels": head.labels });
    Checkpoint::new(Component::Classifier, tensors, metadata)
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<(EncoderParams, ClassifierHead), ClassifierError> {
    if ck.component != Component::Classifier {
        return Err(NnError::CorruptPayload("not a classifier checkpoint".into()).into());
    }
    let bad = |e: serde_json::Error| NnError::CorruptPayload(e.to_string());
    let config: EncoderConfig =
        serde_json::from_value(ck.metadata.get("encoder").cloned().unwrap_or_default()).map_err(bad)?;
    let labels: Vec<String> =
        serde_json::from_value(ck.metadata.get("labels").cloned().unwrap_or_default()).map_err(bad)?;
    config.validate()?;
    let mut encoder = EncoderParams::zeros(config);
    encoder.load_tensors(&ck.tensors)?;
    let mut linear = LinearHead::zeros(HEAD_PREFIX, labels.len(), config.d);
    ParamSet::load_tensors(&mut linear, &ck.tensors)?;
    Ok((encoder, ClassifierHead { linear, labels }))
}

pub fn save(path: &Path, encoder: &EncoderParams, head: &ClassifierHead) -> Result<(), ClassifierError> {
    Ok(to_checkpoint(encoder, head).save(path)?)
}

pub fn load(path: &Path) -> Result<(EncoderParams, ClassifierHead), ClassifierError> {
    from_checkpoint(&Checkpoint::load(path)?)
}

/// Softmax distribution over `head.labels` for the sample.
pub fn predict_distribution(
    encoder: &EncoderParams,
    head: &ClassifierHead,
    sample: &TrafficSample,
) -> Result<Vec<LabelScore>, ClassifierError> {
    head.check(encoder)?;
    let out = encoder_forward(encoder, sample)?;
    let probs = softmax(&head.linear.forward(out.embedding()));
    Ok(head.labels.iter().cloned().zip(probs).map(|(label, probability)| LabelScore { label, probability }).collect())
}

/// Most probable label; ties resolve to the earliest label.
pub fn predict_label(
    encoder: &EncoderParams,
    head: &ClassifierHead,
    sample: &TrafficSample,
) -> Result<(String, f64), ClassifierError> {
    let dist = predict_distribution(encoder, head, sample)?;
    let mut best = 0;
    for (i, s) in dist.iter().enumerate() {
        if s.probability > dist[best].probability {
            best = i;
        }
    }
    Ok((dist[best].label.clone(), dist[best].probability))
}
