//! Rank-based AUROC of the hybrid score as an OOD score.

use super::PipelineError;
use crate::detector::DetectorBundle;
use crate::ingest::{LabelSpace, TrafficSample};

/// Mann-Whitney AUROC with midranks for ties; `positive` marks OOD samples.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64, PipelineError> {
    assert_eq!(scores.len(), positive.len(), "one flag per score");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PipelineError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC of `S` over samples whose gold label is in the ID or OOD set.
pub fn detector_auroc(
    bundle: &DetectorBundle,
    samples: &[&TrafficSample],
    space: &LabelSpace,
) -> Result<f64, PipelineError> {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for s in samples {
        let Some(label) = s.label.as_deref() else { continue };
        if !space.is_id(label) && !space.is_ood(label) {
            continue;
        }
        let b = bundle.detect(s).map_err(super::at("detect"))?;
        scores.push(b.hybrid);
        flags.push(space.is_ood(label));
    }
    auroc(&scores, &flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fraction of (OOD, ID) pairs ranked correctly, ties counting half.
    fn pairwise(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut hits, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    hits += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn separated_and_constant() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8, 0.9, 0.1, 0.2], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(PipelineError::SingleClassInput)));
    }

    #[test]
    fn ten_sample_mixed_case() {
        let scores = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3, 0.5, 0.7, 0.2, 0.6];
        let flags = [false, true, false, false, true, true, false, true, false, false];
        let got = auroc(&scores, &flags).unwrap();
        // 4 OOD × 6 ID = 24 pairs: 18 wins and 3 ties
        assert_eq!(pairwise(&scores, &flags), 19.5 / 24.0);
        assert!((got - 19.5 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn matches_pairwise_with_heavy_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            let mut flags: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            flags[0] = true;
            flags[1] = false;
            assert!((auroc(&scores, &flags).unwrap() - pairwise(&scores, &flags)).abs() < 1e-12);
        }
    }
}
