//! ID feature statistics and the PCA residual subspace.

use serde::{Deserialize, Serialize};

use super::eigen::symmetric_eigen;
use super::DetectorError;
use crate::nn::math::l2_norm;

/// Standard deviations below this are treated as constant dimensions.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-dimension mean and population standard deviation.
pub fn fit_statistics(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), DetectorError> {
    if features.len() < 2 {
        return Err(DetectorError::TooFewSamples { needed: 2, found: features.len() });
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(DetectorError::DimensionMismatch(format!("feature of length {} among length {d}", bad.len())));
    }
    let n = features.len() as f64;
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s < SIGMA_FLOOR { 1.0 } else { s }).collect();
    Ok((mu, sigma))
}

/// Smallest `k` whose leading eigenvalues reach fraction `gamma` of the total.
/// A non-positive total keeps every component.
pub fn select_k(eigenvalues: &[f64], gamma: f64) -> usize {
    let m = eigenvalues.len();
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return m;
    }
    let mut prefix = 0.0;
    for (i, lam) in eigenvalues.iter().enumerate() {
        prefix += lam;
        if prefix / total >= gamma {
            return i + 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[i]` pairs with `eigenvalues[i]`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub k: usize,
    pub gamma: f64,
    /// `V_R V_Rᵀ` over eigenvectors `k..m`, row-major `d × d`.
    pub residual_projector: Vec<f64>,
}

fn projector(vectors: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d * d];
    for v in vectors {
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] += v[i] * v[j];
            }
        }
    }
    p
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `V_P V_Pᵀ` over the leading `k` eigenvectors.
    pub fn principal_projector(&self) -> Vec<f64> {
        projector(&self.eigenvectors[..self.k], self.dim())
    }

    pub fn standardize(&self, phi: &[f64]) -> Result<Vec<f64>, DetectorError> {
        if phi.len() != self.dim() {
            return Err(DetectorError::DimensionMismatch(format!(
                "feature has length {}, model expects {}",
                phi.len(),
                self.dim()
            )));
        }
        Ok(phi.iter().zip(&self.mu).zip(&self.sigma).map(|((x, m), s)| (x - m) / s).collect())
    }

    /// `‖P_R (φ − μ)/σ‖₂`.
    pub fn residual_score(&self, phi: &[f64]) -> Result<f64, DetectorError> {
        let z = self.standardize(phi)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        crate::nn::math::matvec_acc(&self.residual_projector, &z, &mut out);
        debug_assert_eq!(out.len(), d);
        Ok(l2_norm(&out))
    }
}

/// Eigendecomposes the covariance of standardized features and keeps the
/// minor components beyond the `gamma` variance cut as the residual subspace.
pub fn fit_subspace(features: &[Vec<f64>], mu: &[f64], sigma: &[f64], gamma: f64) -> Result<SubspaceModel, DetectorError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(DetectorError::InvalidConfig(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if features.is_empty() {
        return Err(DetectorError::TooFewSamples { needed: 1, found: 0 });
    }
    let d = mu.len();
    if sigma.len() != d {
        return Err(DetectorError::DimensionMismatch("mu and sigma lengths differ".into()));
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        if f.len() != d {
            return Err(DetectorError::DimensionMismatch(format!("feature of length {} for {d} statistics", f.len())));
        }
        let z: Vec<f64> = f.iter().zip(mu).zip(sigma).map(|((x, m), s)| (x - m) / s).collect();
        crate::nn::math::outer_acc(&mut cov, &z, &z);
    }
    let n = features.len() as f64;
    cov.iter_mut().for_each(|c| *c /= n);
    let eig = symmetric_eigen(&cov, d)?;
    let k = select_k(&eig.values, gamma);
    let residual_projector = projector(&eig.vectors[k..], d);
    Ok(SubspaceModel {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        k,
        gamma,
        residual_projector,
    })
}
