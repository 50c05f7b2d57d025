use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::default_extractor;
use crate::perceptual::embedded_distance;

/// Mean pairwise distance per input and the average over inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub score: f64,
    pub per_input: Vec<f64>,
    pub pairs_per_input: usize,
}

fn check_shape(outputs: &[Vec<Image>]) -> Result<usize> {
    let n = outputs.first().ok_or_else(|| Error::InvalidArgument("diversity needs at least one input".into()))?.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs N >= 2 outputs per input, got {n}")));
    }
    if let Some(bad) = outputs.iter().find(|o| o.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, actual: bad.len() });
    }
    Ok(n)
}

fn mean_pairwise(n: usize, mut distance: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += distance(i, j)?;
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

fn report(per_input: Vec<f64>, n: usize) -> DiversityReport {
    let score = per_input.iter().sum::<f64>() / per_input.len() as f64;
    DiversityReport { score, per_input, pairs_per_input: n * (n - 1) / 2 }
}

/// Diversity under an arbitrary distance. Every input must have the same N ≥ 2.
pub fn diversity_score_with<F>(outputs: &[Vec<Image>], mut distance: F) -> Result<DiversityReport>
where
    F: FnMut(&Image, &Image) -> Result<f64>,
{
    let n = check_shape(outputs)?;
    let per_input = outputs.iter().map(|set| mean_pairwise(n, |i, j| distance(&set[i], &set[j]))).collect::<Result<_>>()?;
    Ok(report(per_input, n))
}

/// Diversity under the default perceptual distance; each image is embedded once.
pub fn diversity_score(outputs: &[Vec<Image>]) -> Result<DiversityReport> {
    let n = check_shape(outputs)?;
    let ex = default_extractor();
    let mut per_input = Vec::with_capacity(outputs.len());
    for set in outputs {
        let refs: Vec<&Image> = set.iter().collect();
        let e = ex.embed(&refs)?;
        per_input.push(mean_pairwise(n, |i, j| Ok(embedded_distance(&e[i], &e[j])))?);
    }
    Ok(report(per_input, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;
    use crate::losses::perceptual_distance;
    use crate::rng::seeded;
    use rand::Rng;

    fn noise(seed: u64, n: usize) -> Vec<Image> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let px = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
                Image::new(8, Domain::Lower, i.to_string(), px).unwrap()
            })
            .collect()
    }

    #[test]
    fn table_of_three() {
        let set = noise(1, 3);
        let r = diversity_score_with(&[set], |a, b| {
            Ok(match (a.entity_id.as_str(), b.entity_id.as_str()) {
                ("0", "1") => 0.2,
                ("0", "2") => 0.4,
                _ => 0.6,
            })
        })
        .unwrap();
        assert!((r.score - 0.4).abs() < 1e-12);
        assert_eq!(r.pairs_per_input, 3);
    }

    #[test]
    fn counts_pairs_and_identical_outputs() {
        let mut calls = 0;
        diversity_score_with(&[noise(2, 10)], |_, _| {
            calls += 1;
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(calls, 45);
        let same = vec![noise(3, 1)[0].clone(); 4];
        assert_eq!(diversity_score(&[same]).unwrap().score, 0.0);
    }

    #[test]
    fn embedded_path_matches_direct_distance() {
        let sets = vec![noise(4, 3), noise(5, 3)];
        let fast = diversity_score(&sets).unwrap();
        let slow = diversity_score_with(&sets, perceptual_distance).unwrap();
        for (a, b) in fast.per_input.iter().zip(&slow.per_input) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn ordering_invariance() {
        let sets = vec![noise(6, 4), noise(7, 4), noise(8, 4)];
        let base = diversity_score(&sets).unwrap().score;
        let mut shuffled: Vec<Vec<Image>> = sets.iter().rev().cloned().collect();
        shuffled[0].reverse();
        shuffled[2].swap(0, 3);
        assert!((diversity_score(&shuffled).unwrap().score - base).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(diversity_score(&[]).is_err());
        assert!(diversity_score(&[noise(1, 1)]).is_err());
        assert!(diversity_score(&[noise(1, 3), noise(2, 4)]).is_err());
    }
}
