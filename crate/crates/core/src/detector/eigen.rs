//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::DetectorError;

pub const MAX_SWEEPS: usize = 100;
pub const OFF_DIAGONAL_TOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, sorted by non-increasing eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector of `values[i]`.
    pub vectors: Vec<Vec<f64>>,
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Decomposes the row-major `n × n` symmetric matrix `a`.
///
/// Stops once the off-diagonal Frobenius norm falls below
/// `OFF_DIAGONAL_TOL · max(1, ‖a‖_F)`; fails after `MAX_SWEEPS` sweeps.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen, DetectorError> {
    if a.len() != n * n {
        return Err(DetectorError::DimensionMismatch(format!("matrix has {} entries, expected {n}x{n}", a.len())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(DetectorError::DecompositionFailure("matrix has non-finite entries".into()));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let mut converged = off_diagonal_norm(&a, n) < OFF_DIAGONAL_TOL * scale;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a, n) < OFF_DIAGONAL_TOL * scale;
    }
    if !converged {
        return Err(DetectorError::DecompositionFailure(format!("no convergence after {MAX_SWEEPS} sweeps")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok(SymmetricEigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(e: &SymmetricEigen, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for (lam, vec) in e.values.iter().zip(&e.vectors) {
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += lam * vec[i] * vec[j];
                }
            }
        }
        out
    }

    #[test]
    fn two_by_two_matches_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (a, b, c): (f64, f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let e = symmetric_eigen(&[a, b, b, c], 2).unwrap();
            // roots of λ² − (a+c)λ + (ac − b²)
            let mid = (a + c) / 2.0;
            let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
            assert!((e.values[0] - (mid + rad)).abs() < 1e-9);
            assert!((e.values[1] - (mid - rad)).abs() < 1e-9);
        }
    }

    #[test]
    fn random_four_by_four_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = 4;
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let x = rng.gen_range(-2.0..2.0);
                    m[i * n + j] = x;
                    m[j * n + i] = x;
                }
            }
            let e = symmetric_eigen(&m, n).unwrap();
            for (x, y) in reconstruct(&e, n).iter().zip(&m) {
                assert!((x - y).abs() < 1e-6);
            }
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = (0..n).map(|k| e.vectors[i][k] * e.vectors[j][k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn diagonal_input_is_sorted() {
        let e = symmetric_eigen(&[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0], 3).unwrap();
        assert_eq!(e.values, vec![5.0, 3.0, 1.0]);
        assert_eq!(e.vectors[0], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_fails() {
        assert!(matches!(symmetric_eigen(&[f64::NAN, 0.0, 0.0, 1.0], 2), Err(DetectorError::DecompositionFailure(_))));
        assert!(matches!(symmetric_eigen(&[1.0, 0.0, 0.0], 2), Err(DetectorError::DimensionMismatch(_))));
    }
}
