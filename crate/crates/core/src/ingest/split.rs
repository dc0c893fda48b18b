use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, IngestError, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), IngestError> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(IngestError::InvalidRatios(format!("{self:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(IngestError::InvalidRatios(format!("{self:?} does not sum to 1")));
        }
        Ok(())
    }
}

/// Count for one share of `n`, floored with a small tolerance against
/// representation error (0.1 * 30 must give 3).
pub(crate) fn share(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Splits `n` items into (train, valid, test) counts. Every split with a
/// non-zero ratio receives at least one item.
pub(crate) fn partition_counts(label: &str, n: usize, r: &SplitRatios) -> Result<[usize; 3], IngestError> {
    let needed = [r.train, r.valid, r.test].iter().filter(|&&x| x > 0.0).count();
    if n < needed {
        return Err(IngestError::InsufficientSamples { label: label.to_string(), count: n, needed });
    }
    let mut valid = share(n, r.valid);
    let mut test = share(n, r.test);
    if r.valid > 0.0 {
        valid = valid.max(1);
    }
    if r.test > 0.0 {
        test = test.max(1);
    }
    if r.train == 0.0 {
        // everything not in valid goes to test
        test = n - valid;
    }
    let train = n - valid - test;
    if r.train > 0.0 && train == 0 {
        return Err(IngestError::InsufficientSamples { label: label.to_string(), count: n, needed });
    }
    Ok([train, valid, test])
}

/// Stratified re-split. ID classes are spread over all three splits by
/// `ratios`; OOD classes only over valid and test, in the valid:test proportion.
pub fn split_dataset(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Dataset, IngestError> {
    ratios.validate()?;
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let label = s.label.as_deref().ok_or_else(|| IngestError::InsufficientSamples {
            label: format!("<unlabeled sample {}>", s.id),
            count: 0,
            needed: 1,
        })?;
        by_label.entry(label).or_default().push(i);
    }

    let eval_total = ratios.valid + ratios.test;
    let ood_ratios = if eval_total > 0.0 {
        SplitRatios { train: 0.0, valid: ratios.valid / eval_total, test: ratios.test / eval_total }
    } else {
        return Err(IngestError::InvalidRatios("valid and test ratios are both zero".into()));
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    for (label, mut idx) in by_label {
        idx.shuffle(&mut rng);
        let r = if dataset.label_space.is_id(label) { &ratios } else { &ood_ratios };
        let [train, valid, _] = partition_counts(label, idx.len(), r)?;
        for (pos, &i) in idx.iter().enumerate() {
            let split = if pos < train {
                Split::Train
            } else if pos < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            assignments.insert(dataset.samples[i].id.clone(), split);
        }
    }
    Ok(Dataset { samples: dataset.samples.clone(), label_space: dataset.label_space.clone(), assignments })
}
