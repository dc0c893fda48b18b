//! Stage one: residual-subspace and inter-layer smoothness scores, their
//! calibrated mix, and the ID/OOD decision.

pub mod eigen;
pub mod subspace;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TrafficSample;
use crate::nn::math::l2_norm;
use crate::nn::{encoder_forward, extract_feature, Checkpoint, Component, EncoderOutput, EncoderParams, LstmParams, NnError, ParamSet};

pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use subspace::{fit_statistics, fit_subspace, select_k, SubspaceModel};

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_DELTA: f64 = 0.75;
pub const DEFAULT_GAMMA: f64 = 0.95;
/// Calibration needs at least this many ID validation samples.
pub const MIN_CALIBRATION_SAMPLES: usize = 20;
pub const LOW_PERCENTILE: f64 = 1.0;
pub const HIGH_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigendecomposition failed: {0}")]
    DecompositionFailure(String),
    #[error("detector is not fitted: missing {0}")]
    NotFitted(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `Σ_l ‖F_l − F_{l−1}‖₂` over pooled per-layer states.
pub fn smoothness_from_output(output: &EncoderOutput) -> f64 {
    output.pooled.windows(2).map(|w| {
        let diff: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
        l2_norm(&diff)
    }).sum()
}

pub fn smoothness_score(encoder: &EncoderParams, sample: &TrafficSample) -> Result<f64, DetectorError> {
    Ok(smoothness_from_output(&encoder_forward(encoder, sample)?))
}

/// Linear interpolation between closest ranks, `p` in percent.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Affine map of a raw score onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub low: f64,
    pub high: f64,
}

impl Normalizer {
    /// Robust bounds of `scores`; a degenerate range becomes `[low, low + 1]`.
    pub fn fit(scores: &[f64]) -> Self {
        let low = percentile(scores, LOW_PERCENTILE);
        let mut high = percentile(scores, HIGH_PERCENTILE);
        if high <= low {
            high = low + 1.0;
        }
        Self { low, high }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        ((x - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridScoreConfig {
    pub alpha: f64,
    pub delta: f64,
    pub residual: Normalizer,
    pub smoothness: Normalizer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridScore {
    pub score: f64,
    pub is_ood: bool,
}

/// `S = α·s1 + (1 − α)·s2`, flagged OOD when `S > δ`.
pub fn hybrid_score(alpha: f64, delta: f64, s1_norm: f64, s2_norm: f64) -> HybridScore {
    let score = alpha * s1_norm + (1.0 - alpha) * s2_norm;
    HybridScore { score, is_ood: score > delta }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub residual_raw: f64,
    pub smoothness_raw: f64,
    pub residual_norm: f64,
    pub smoothness_norm: f64,
    pub hybrid: f64,
    pub is_ood: bool,
}

impl HybridScoreConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DetectorError::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        for n in [self.residual, self.smoothness] {
            if !(n.low < n.high) {
                return Err(DetectorError::InvalidConfig(format!("normalizer bounds {} >= {}", n.low, n.high)));
            }
        }
        Ok(())
    }

    pub fn breakdown(&self, residual_raw: f64, smoothness_raw: f64) -> ScoreBreakdown {
        let residual_norm = self.residual.normalize(residual_raw);
        let smoothness_norm = self.smoothness.normalize(smoothness_raw);
        let h = hybrid_score(self.alpha, self.delta, residual_norm, smoothness_norm);
        ScoreBreakdown { residual_raw, smoothness_raw, residual_norm, smoothness_norm, hybrid: h.score, is_ood: h.is_ood }
    }
}

/// Fits both normalizers from raw ID validation scores.
pub fn calibrate_from_scores(
    residual: &[f64],
    smoothness: &[f64],
    alpha: f64,
    delta: f64,
) -> Result<HybridScoreConfig, DetectorError> {
    let n = residual.len().min(smoothness.len());
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(DetectorError::TooFewSamples { needed: MIN_CALIBRATION_SAMPLES, found: n });
    }
    if residual.len() != smoothness.len() {
        return Err(DetectorError::DimensionMismatch("score lists differ in length".into()));
    }
    let cfg = HybridScoreConfig { alpha, delta, residual: Normalizer::fit(residual), smoothness: Normalizer::fit(smoothness) };
    cfg.validate()?;
    Ok(cfg)
}

/// Everything stage one needs; components stay optional until fitted.
#[derive(Debug, Clone, Default)]
pub struct DetectorBundle {
    pub lstm: Option<LstmParams>,
    pub subspace: Option<SubspaceModel>,
    /// The ID classifier's encoder, source of the per-layer states.
    pub encoder: Option<EncoderParams>,
    pub scoring: Option<HybridScoreConfig>,
}

impl DetectorBundle {
    /// Fits `μ`, `σ` and the residual subspace on LSTM features of `id_train`.
    pub fn fit(
        lstm: LstmParams,
        encoder: EncoderParams,
        id_train: &[&TrafficSample],
        gamma: f64,
    ) -> Result<Self, DetectorError> {
        let feats = id_train.iter().map(|s| extract_feature(&lstm, s)).collect::<Result<Vec<_>, _>>()?;
        let (mu, sigma) = fit_statistics(&feats)?;
        let subspace = fit_subspace(&feats, &mu, &sigma, gamma)?;
        Ok(Self { lstm: Some(lstm), subspace: Some(subspace), encoder: Some(encoder), scoring: None })
    }

    /// Raw `(s1, s2)` for one sample.
    pub fn raw_scores(&self, sample: &TrafficSample) -> Result<(f64, f64), DetectorError> {
        let lstm = self.lstm.as_ref().ok_or(DetectorError::NotFitted("feature extractor"))?;
        let subspace = self.subspace.as_ref().ok_or(DetectorError::NotFitted("residual subspace"))?;
        let encoder = self.encoder.as_ref().ok_or(DetectorError::NotFitted("encoder"))?;
        let s1 = subspace.residual_score(&extract_feature(lstm, sample)?)?;
        let s2 = smoothness_score(encoder, sample)?;
        Ok((s1, s2))
    }

    /// Sets the normalizers from ID validation samples.
    pub fn calibrate(&mut self, id_valid: &[&TrafficSample], alpha: f64, delta: f64) -> Result<HybridScoreConfig, DetectorError> {
        if id_valid.len() < MIN_CALIBRATION_SAMPLES {
            return Err(DetectorError::TooFewSamples { needed: MIN_CALIBRATION_SAMPLES, found: id_valid.len() });
        }
        let raw = id_valid.iter().map(|s| self.raw_scores(s)).collect::<Result<Vec<_>, _>>()?;
        let (s1, s2): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
        let cfg = calibrate_from_scores(&s1, &s2, alpha, delta)?;
        self.scoring = Some(cfg);
        Ok(cfg)
    }

    pub fn detect(&self, sample: &TrafficSample) -> Result<ScoreBreakdown, DetectorError> {
        let scoring = self.scoring.as_ref().ok_or(DetectorError::NotFitted("calibration"))?;
        let (s1, s2) = self.raw_scores(sample)?;
        Ok(scoring.breakdown(s1, s2))
    }

    /// Checkpoint with the LSTM weights; subspace and calibration go in the metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint, DetectorError> {
        let lstm = self.lstm.as_ref().ok_or(DetectorError::NotFitted("feature extractor"))?;
        let metadata = serde_json::json!({
            "d": lstm.d,
            "d_in": lstm.d_in,
            "subspace": self.subspace,
            "scoring": self.scoring,
        });
        Ok(Checkpoint::new(Component::Detector, lstm.tensors().into_iter().cloned().collect(), metadata))
    }

    /// Inverse of [`DetectorBundle::to_checkpoint`]; the encoder is supplied separately.
    pub fn from_checkpoint(ck: &Checkpoint, encoder: Option<EncoderParams>) -> Result<Self, DetectorError> {
        if ck.component != Component::Detector {
            return Err(NnError::CorruptPayload("not a detector checkpoint".into()).into());
        }
        let field = |name: &str| {
            ck.metadata.get(name).cloned().ok_or_else(|| NnError::CorruptPayload(format!("metadata lacks {name}")))
        };
        let size = |name: &str| -> Result<usize, NnError> {
            field(name)?.as_u64().map(|v| v as usize).ok_or_else(|| NnError::CorruptPayload(format!("bad {name}")))
        };
        let mut lstm = LstmParams::zeros(size("d")?, size("d_in")?);
        lstm.load_tensors(&ck.tensors)?;
        let subspace: Option<SubspaceModel> =
            serde_json::from_value(field("subspace")?).map_err(|e| NnError::CorruptPayload(e.to_string()))?;
        let scoring: Option<HybridScoreConfig> =
            serde_json::from_value(field("scoring")?).map_err(|e| NnError::CorruptPayload(e.to_string()))?;
        Ok(Self { lstm: Some(lstm), subspace, encoder, scoring })
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path, encoder: Option<EncoderParams>) -> Result<Self, DetectorError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Origin;
    use crate::nn::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hybrid_examples() {
        assert_eq!(hybrid_score(0.6, 0.75, 1.0, 0.0).score, 0.6);
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            assert!((hybrid_score(alpha, 0.75, 0.4, 0.4).score - 0.4).abs() <= f64::EPSILON);
        }
        assert!(!hybrid_score(1.0, 0.75, 0.75, 0.0).is_ood);
        assert!(hybrid_score(1.0, 0.75, 0.7501, 0.0).is_ood);
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit(&[2.0; 30]);
        assert_eq!(n, Normalizer { low: 2.0, high: 3.0 });
        assert_eq!(n.normalize(2.0), 0.0);
        let values: Vec<f64> = (0..101).map(f64::from).collect();
        let n = Normalizer::fit(&values);
        assert_eq!((n.low, n.high), (1.0, 99.0));
        assert_eq!(n.normalize(99.0), 1.0);
        assert_eq!(n.normalize(-5.0), 0.0);
        assert_eq!(n.normalize(50.0), 49.0 / 98.0);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.5);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
    }

    #[test]
    fn calibration_needs_twenty() {
        assert!(matches!(
            calibrate_from_scores(&[1.0; 19], &[1.0; 19], 0.6, 0.75),
            Err(DetectorError::TooFewSamples { needed: 20, found: 19 })
        ));
        assert!(calibrate_from_scores(&[1.0; 20], &[1.0; 20], 0.6, 0.75).is_ok());
        assert!(matches!(
            calibrate_from_scores(&[1.0; 20], &[1.0; 20], 1.2, 0.75),
            Err(DetectorError::InvalidConfig(_))
        ));
    }

    #[test]
    fn smoothness_examples() {
        let out = EncoderOutput { pooled: vec![vec![0.0, 0.0], vec![3.0, 4.0]] };
        assert_eq!(smoothness_from_output(&out), 5.0);
        let out = EncoderOutput { pooled: vec![vec![1.0, 2.0]; 4] };
        assert_eq!(smoothness_from_output(&out), 0.0);
    }

    fn samples(n: usize, seed: u16) -> Vec<TrafficSample> {
        (0..n)
            .map(|i| TrafficSample {
                id: format!("s{i}"),
                tokens: (0..6).map(|t| (i as u16 * 7 + t * 13 + seed) % 256).collect(),
                label: Some("A".into()),
                origin: Origin::Synthetic,
            })
            .collect()
    }

    fn fitted() -> DetectorBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lstm = LstmParams::init(4, 3, &mut rng);
        let enc = EncoderParams::init(EncoderConfig::new(4, 2, 2, 6), &mut rng);
        let train = samples(30, 0);
        let refs: Vec<&TrafficSample> = train.iter().collect();
        let mut b = DetectorBundle::fit(lstm, enc, &refs, 0.9).unwrap();
        let valid = samples(25, 5);
        let refs: Vec<&TrafficSample> = valid.iter().collect();
        b.calibrate(&refs, 0.6, 0.75).unwrap();
        b
    }

    #[test]
    fn detect_requires_every_component() {
        let s = &samples(1, 0)[0];
        assert!(matches!(DetectorBundle::default().detect(s), Err(DetectorError::NotFitted(_))));
        let mut b = fitted();
        b.scoring = None;
        assert!(matches!(b.detect(s), Err(DetectorError::NotFitted("calibration"))));
    }

    #[test]
    fn alpha_extremes_select_one_component() {
        let mut b = fitted();
        let s = &samples(3, 40)[2];
        for alpha in [0.0, 1.0] {
            b.scoring.as_mut().unwrap().alpha = alpha;
            let r = b.detect(s).unwrap();
            let want = if alpha == 1.0 { r.residual_norm } else { r.smoothness_norm };
            assert_eq!(r.hybrid, want);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_scores() {
        let b = fitted();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.ckpt");
        b.save(&path).unwrap();
        let back = DetectorBundle::load(&path, b.encoder.clone()).unwrap();
        assert_eq!(back.lstm, b.lstm);
        assert_eq!(back.subspace, b.subspace);
        assert_eq!(back.scoring, b.scoring);
        for s in samples(5, 77).iter() {
            assert_eq!(back.detect(s).unwrap(), b.detect(s).unwrap());
        }
    }
}
