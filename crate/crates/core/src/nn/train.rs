//! Training loops for both stages.
//!
//! Stage one trains the LSTM under a one-vs-rest sigmoid head over the ID
//! classes with per-class binary cross-entropy on logits (Adam); the head is
//! discarded afterwards. Stage two trains the encoder and a softmax head with
//! cross-entropy (AdamW). Both are pure functions of (dataset, config).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::encoder::{self, EncoderConfig, EncoderParams};
use super::lstm::{self, LstmParams};
use super::math::{sigmoid, softmax};
use super::optim::{Adam, AdamConfig};
use super::{LinearHead, NnError, ParamSet, Tensor};
use crate::classifier::ClassifierHead;
use crate::ingest::{Dataset, Split, TrafficSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Stage-one defaults: Adam, lr 2e-5, 20 epochs.
    pub fn detector_default() -> Self {
        Self { epochs: 20, learning_rate: 2e-5, batch_size: 32, seed: 42 }
    }

    /// Stage-two defaults: AdamW, lr 2e-5, 30 epochs.
    pub fn classifier_default() -> Self {
        Self { epochs: 30, ..Self::detector_default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    /// Mean training loss of every epoch.
    pub loss_curve: Vec<f64>,
}

/// LSTM plus its one-vs-rest training head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainModel {
    pub lstm: LstmParams,
    pub head: LinearHead,
}

impl ParamSet for DetectorTrainModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.lstm.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.lstm.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

impl DetectorTrainModel {
    /// Mean per-class BCE-with-logits against a one-hot target; accumulates gradients.
    pub fn loss_grad(&self, tokens: &[u16], class: usize, grad: &mut Self) -> f64 {
        let trace = lstm::forward_trace(&self.lstm, tokens);
        let logits = self.head.forward(&trace.h_last);
        let n = logits.len() as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; logits.len()];
        for (k, &z) in logits.iter().enumerate() {
            let y = if k == class { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            dz[k] = (sigmoid(z) - y) / n;
        }
        let dh = self.head.backward(&trace.h_last, &dz, &mut grad.head);
        lstm::backward(&self.lstm, &trace, &dh, &mut grad.lstm);
        loss / n
    }

    pub fn loss(&self, tokens: &[u16], class: usize) -> f64 {
        let mut scratch = self.clone();
        self.loss_grad(tokens, class, &mut scratch)
    }
}

/// Encoder plus softmax classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainModel {
    pub encoder: EncoderParams,
    pub head: LinearHead,
}

impl ParamSet for ClassifierTrainModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

impl ClassifierTrainModel {
    /// Cross-entropy of the softmax head on `F_L`; accumulates gradients.
    pub fn loss_grad(&self, tokens: &[u16], class: usize, grad: &mut Self) -> Result<f64, NnError> {
        let trace = encoder::forward_trace(&self.encoder, tokens)?;
        let pooled = trace.output.embedding().to_vec();
        let probs = softmax(&self.head.forward(&pooled));
        let loss = -probs[class].max(f64::MIN_POSITIVE).ln();
        let mut dz = probs;
        dz[class] -= 1.0;
        let dpooled = self.head.backward(&pooled, &dz, &mut grad.head);
        encoder::backward(&self.encoder, &trace, &dpooled, &mut grad.encoder);
        Ok(loss)
    }

    pub fn loss(&self, tokens: &[u16], class: usize) -> Result<f64, NnError> {
        let mut scratch = self.clone();
        self.loss_grad(tokens, class, &mut scratch)
    }
}

fn id_training_set(dataset: &Dataset) -> Result<Vec<(&TrafficSample, usize)>, NnError> {
    let labels = &dataset.label_space.id_labels;
    let mut out = Vec::new();
    for s in dataset.split(Split::Train) {
        let label = s.label.as_deref().unwrap_or("");
        match labels.iter().position(|l| l == label) {
            Some(class) => out.push((s, class)),
            None => {
                return Err(NnError::InvalidConfig(format!(
                    "train split holds sample {:?} with non-ID label {label:?}",
                    s.id
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    Ok(out)
}

fn run_epochs<M: ParamSet + Clone>(
    stage: &str,
    model: &mut M,
    samples: &[(&TrafficSample, usize)],
    config: &TrainConfig,
    adam: AdamConfig,
    rng: &mut ChaCha8Rng,
    mut loss_grad: impl FnMut(&M, &[u16], usize, &mut M) -> Result<f64, NnError>,
) -> Result<Vec<f64>, NnError> {
    if config.batch_size == 0 {
        return Err(NnError::InvalidConfig("batch size must be positive".into()));
    }
    let mut opt = Adam::new(adam);
    let mut grad = model.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.zero_grad();
            for &i in batch {
                let (s, class) = samples[i];
                total += loss_grad(model, &s.tokens, class, &mut grad)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(model.tensors_mut(), grad.tensors());
        }
        let mean = total / samples.len() as f64;
        info!(stage, epoch = epoch + 1, loss = mean, "epoch finished");
        curve.push(mean);
    }
    Ok(curve)
}

/// Trains the LSTM feature extractor (`d` hidden, `d_in` embedding) and drops the head.
pub fn train_feature_extractor(
    dataset: &Dataset,
    d: usize,
    d_in: usize,
    config: &TrainConfig,
) -> Result<(LstmParams, TrainReport), NnError> {
    let samples = id_training_set(dataset)?;
    if d == 0 || d_in == 0 {
        return Err(NnError::InvalidConfig("LSTM sizes must be positive".into()));
    }
    let n_classes = dataset.label_space.id_labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DetectorTrainModel {
        lstm: LstmParams::init(d, d_in, &mut rng),
        head: LinearHead::new("detector_head", n_classes, d, &mut rng),
    };
    let curve = run_epochs(
        "feature-extractor",
        &mut model,
        &samples,
        config,
        AdamConfig::adam(config.learning_rate),
        &mut rng,
        |m, tokens, class, g| Ok(m.loss_grad(tokens, class, g)),
    )?;
    model.snap_f32();
    Ok((model.lstm, TrainReport { seed: config.seed, epochs: config.epochs, loss_curve: curve }))
}

/// Trains the transformer encoder with a softmax head over the ID labels.
pub fn train_classifier(
    dataset: &Dataset,
    encoder_config: EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderParams, ClassifierHead, TrainReport), NnError> {
    encoder_config.validate()?;
    let samples = id_training_set(dataset)?;
    let labels = dataset.label_space.id_labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ClassifierTrainModel {
        encoder: EncoderParams::init(encoder_config, &mut rng),
        head: LinearHead::new(crate::classifier::HEAD_PREFIX, labels.len(), encoder_config.d, &mut rng),
    };
    let curve = run_epochs(
        "classifier",
        &mut model,
        &samples,
        config,
        AdamConfig::adamw(config.learning_rate),
        &mut rng,
        |m, tokens, class, g| m.loss_grad(tokens, class, g),
    )?;
    model.snap_f32();
    let head = ClassifierHead { linear: model.head, labels };
    Ok((model.encoder, head, TrainReport { seed: config.seed, epochs: config.epochs, loss_curve: curve }))
}
