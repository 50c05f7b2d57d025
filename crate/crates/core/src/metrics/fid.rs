use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian fit of a feature set: mean, unbiased covariance, sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Two-pass mean and covariance over feature rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(format!("covariance needs at least 2 samples, got {}", rows.len())));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
        }
        let n = rows.len() as f64;
        // Deviations are taken from the first row before centring, so a set of
        // identical rows yields an exactly zero covariance.
        let origin = &rows[0];
        let mut shift = vec![0.0; d];
        for r in rows {
            for ((m, v), o) in shift.iter_mut().zip(r).zip(origin) {
                *m += v - o;
            }
        }
        shift.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - origin[i] - shift[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - origin[j] - shift[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let mean = origin.iter().zip(&shift).map(|(o, s)| o + s).collect();
        Ok(Self { mean, cov, count: rows.len() })
    }

    /// Stats from explicit moments (used for closed-form checks).
    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, actual: cov.len() });
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Eigen-decomposition of a symmetric PSD matrix with small negative eigenvalues
/// clamped to zero. Larger negatives are an error.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::SquareRoot(format!("{what}: non-finite eigenvalues")));
    }
    if min < -1e-6 * max.max(1.0) {
        return Err(Error::SquareRoot(format!(
            "{what} is not positive semi-definite: eigenvalues span [{min:.3e}, {max:.3e}]"
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`.
///
/// `tr((Σa Σb)^½)` is computed as `tr((√Σa Σb √Σa)^½)`, which has the same
/// eigenvalues and keeps every decomposition symmetric.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let diff: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let sa = psd_sqrt(ca.clone(), "first covariance")?;
    let inner = &sa * &cb * &sa;
    let eig = psd_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = diff + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_stats(seed: u64, d: usize, n: usize) -> FeatureStats {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        FeatureStats::from_rows(&rows).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = FeatureStats::from_moments(vec![0.0], vec![1.0], 2).unwrap();
        let b = FeatureStats::from_moments(vec![1.0], vec![1.0], 2).unwrap();
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_symmetric() {
        let a = random_stats(1, 6, 40);
        let b = random_stats(2, 6, 40);
        assert!(fid(&a, &a).unwrap() < 1e-9);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    #[test]
    fn two_pass_oracle_and_duplicates() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![2.0, 4.0]];
        let s = FeatureStats::from_rows(&rows).unwrap();
        let mx = (1.0 + 3.0 + 0.5 + 2.0) / 4.0;
        let my = (2.0 - 1.0 + 0.5 + 4.0) / 4.0;
        let cxy: f64 = rows.iter().map(|r| (r[0] - mx) * (r[1] - my)).sum::<f64>() / 3.0;
        assert!((s.mean[0] - mx).abs() < 1e-12 && (s.cov[1] - cxy).abs() < 1e-12);
        let dup = FeatureStats::from_rows(&vec![vec![0.3, 0.7]; 5]).unwrap();
        assert!(dup.cov.iter().all(|&v| v == 0.0));
        assert!(FeatureStats::from_rows(&rows[..1]).is_err());
    }

    #[test]
    fn rejects_mismatch_and_indefinite() {
        let a = random_stats(1, 3, 10);
        let b = random_stats(1, 4, 10);
        assert!(matches!(fid(&a, &b), Err(Error::DimensionMismatch { .. })));
        let bad = FeatureStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0], 2).unwrap();
        assert!(matches!(fid(&bad, &bad), Err(Error::SquareRoot(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn diagonal_closed_form(vals in prop::collection::vec((-2.0f64..2.0, 0.01f64..3.0, -2.0f64..2.0, 0.01f64..3.0), 1..6)) {
            let d = vals.len();
            let mut ca = vec![0.0; d * d];
            let mut cb = vec![0.0; d * d];
            for (i, v) in vals.iter().enumerate() {
                ca[i * d + i] = v.1;
                cb[i * d + i] = v.3;
            }
            let a = FeatureStats::from_moments(vals.iter().map(|v| v.0).collect(), ca, 2).unwrap();
            let b = FeatureStats::from_moments(vals.iter().map(|v| v.2).collect(), cb, 2).unwrap();
            let expected: f64 = vals.iter().map(|v| (v.0 - v.2).powi(2) + (v.1.sqrt() - v.3.sqrt()).powi(2)).sum();
            prop_assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-6);
        }
    }
}
