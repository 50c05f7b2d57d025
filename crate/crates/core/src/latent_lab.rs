//! Continuous translation inside the target domain by mixing the mapped and the
//! encoded style embeddings.

use serde::{Deserialize, Serialize};

use crate::dataset::Direction;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::CompatibilityOracle;
use crate::networks::{GeneratorBundle, LatentCode, Origin, StyleEmbedding};
use crate::rng::seeded;

/// Strictly increasing mixing ratios from 0 to 1 inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    ratios: Vec<f64>,
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self { ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0] }
    }
}

impl MixSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.len() < 2 {
            return Err(Error::Config("a mix schedule needs at least the two endpoints".into()));
        }
        if ratios[0] != 0.0 || *ratios.last().expect("non-empty") != 1.0 {
            return Err(Error::Config(format!("mix schedule must start at 0 and end at 1, got {ratios:?}")));
        }
        if ratios.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("mix schedule must be strictly increasing, got {ratios:?}")));
        }
        Ok(Self { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }
}

impl std::str::FromStr for MixSchedule {
    type Err = Error;

    /// Comma-separated ratios, e.g. `0,0.5,1`.
    fn from_str(s: &str) -> Result<Self> {
        let ratios = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad mix ratio {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratios)
    }
}

/// `w_orig·(1 − α) + w·α`.
pub fn mix_embeddings(w_orig: &StyleEmbedding, w: &StyleEmbedding, alpha: f64) -> Result<StyleEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("mixing ratio must lie in [0, 1], got {alpha}")));
    }
    if w_orig.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: w_orig.len(), actual: w.len() });
    }
    let values = w_orig.values.iter().zip(&w.values).map(|(a, b)| a * (1.0 - alpha) + b * alpha).collect();
    Ok(StyleEmbedding { values, origin: Origin::Mixed })
}

/// One image per ratio for a single `(x, z)`.
pub fn interpolation_strip(bundle: &GeneratorBundle, x: &Image, z: &LatentCode, schedule: &MixSchedule) -> Result<Vec<Image>> {
    let gen = bundle.generate(x, z)?;
    schedule.ratios().iter().map(|&a| bundle.synthesize(&mix_embeddings(&gen.w_orig, &gen.w, a)?)).collect()
}

/// Adjacent-ratio comparison, labelled like `"0.00 vs 0.25"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatRow {
    pub label: String,
    pub lower: f64,
    pub higher: f64,
    /// Trials where the higher ratio's output scored strictly higher.
    pub wins: usize,
    pub trials: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatTable {
    pub direction: Direction,
    pub rows: Vec<BeatRow>,
    /// Mean oracle score at each ratio, in schedule order.
    pub mean_phi: Vec<(f64, f64)>,
}

pub fn beat_label(lower: f64, higher: f64) -> String {
    format!("{lower:.2} vs {higher:.2}")
}

/// For every input and `codes_per_input` latents drawn from `seed`, synthesises
/// the output at each ratio and counts strict wins of the larger ratio over the
/// smaller under the oracle.
pub fn mix_ratio_study(
    bundle: &GeneratorBundle,
    direction: Direction,
    inputs: &[&Image],
    codes_per_input: usize,
    seed: u64,
    schedule: &MixSchedule,
    oracle: &CompatibilityOracle,
) -> Result<BeatTable> {
    if direction.target() != bundle.target {
        return Err(Error::DomainMismatch { expected: direction.target(), actual: bundle.target });
    }
    if inputs.is_empty() || codes_per_input == 0 {
        return Err(Error::InvalidArgument("mix study needs at least one input and one latent code".into()));
    }
    let ratios = schedule.ratios();
    let mut rng = seeded(seed);
    let mut wins = vec![0usize; ratios.len() - 1];
    let mut phi_sum = vec![0.0; ratios.len()];
    let mut trials = 0usize;
    for x in inputs {
        for _ in 0..codes_per_input {
            let z = LatentCode::sample(bundle.arch.latent_dim, &mut rng);
            let strip = interpolation_strip(bundle, x, &z, schedule)?;
            let scores = strip.iter().map(|y| oracle.phi(x, y)).collect::<Result<Vec<_>>>()?;
            for (k, pair) in scores.windows(2).enumerate() {
                wins[k] += usize::from(pair[1] > pair[0]);
            }
            phi_sum.iter_mut().zip(&scores).for_each(|(s, v)| *s += v);
            trials += 1;
        }
    }
    let rows = ratios
        .windows(2)
        .zip(wins)
        .map(|(w, wins)| BeatRow {
            label: beat_label(w[0], w[1]),
            lower: w[0],
            higher: w[1],
            wins,
            trials,
            percent: 100.0 * wins as f64 / trials as f64,
        })
        .collect();
    let mean_phi = ratios.iter().zip(phi_sum).map(|(&a, s)| (a, s / trials as f64)).collect();
    Ok(BeatTable { direction, rows, mean_phi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, DatasetSpec};
    use crate::image::Domain;
    use crate::networks::Architecture;
    use proptest::prelude::*;

    fn emb(values: Vec<f64>, origin: Origin) -> StyleEmbedding {
        StyleEmbedding { values, origin }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let a = emb(vec![0.3, -1.7, 2.5e-3], Origin::Mapped);
        let b = emb(vec![-4.0, 0.1, 9.0], Origin::Encoded);
        assert_eq!(mix_embeddings(&a, &b, 0.0).unwrap().values, a.values);
        assert_eq!(mix_embeddings(&a, &b, 1.0).unwrap().values, b.values);
        let m = mix_embeddings(&a, &b, 0.5).unwrap();
        assert_eq!(m.origin, Origin::Mixed);
        for i in 0..3 {
            assert!((m.values[i] - (a.values[i] + b.values[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn errors() {
        let a = emb(vec![0.0; 3], Origin::Mapped);
        assert!(mix_embeddings(&a, &a, 1.5).is_err());
        assert!(mix_embeddings(&a, &a, -0.1).is_err());
        assert!(mix_embeddings(&a, &emb(vec![0.0; 2], Origin::Encoded), 0.5).is_err());
        assert!(MixSchedule::new(vec![0.0, 0.5]).is_err());
        assert!(MixSchedule::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!("0, 0.3, 1".parse::<MixSchedule>().is_ok());
        assert!("0,x,1".parse::<MixSchedule>().is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(beat_label(0.0, 0.25), "0.00 vs 0.25");
        assert_eq!(beat_label(0.75, 1.0), "0.75 vs 1.00");
    }

    #[test]
    fn strip_endpoints_and_study_shape() {
        let arch = Architecture { resolution: 8, latent_dim: 8, synthesis_width: 8, ..Architecture::default() };
        let bundle = GeneratorBundle::new(arch, Domain::Lower, 3).unwrap();
        let mut multiplicity = std::collections::BTreeMap::new();
        multiplicity.insert(1, 4);
        let ds = generate_synthetic_dataset(&DatasetSpec { n_upper: 4, n_lower: 8, resolution: 8, multiplicity, ..DatasetSpec::default() })
            .unwrap();
        let x = ds.uppers[0].image();
        let z = LatentCode::sample(8, &mut seeded(1));
        let schedule = MixSchedule::default();
        let strip = interpolation_strip(&bundle, x, &z, &schedule).unwrap();
        assert_eq!(strip.len(), 5);
        let gen = bundle.generate(x, &z).unwrap();
        assert_eq!(strip[0], bundle.synthesize(&gen.w_orig).unwrap());
        assert_eq!(strip[4], gen.y);

        let oracle = CompatibilityOracle::new(ds.rule.clone().unwrap(), ds.attribute_store());
        let inputs: Vec<&Image> = ds.uppers.iter().map(|g| g.image()).collect();
        let table = mix_ratio_study(&bundle, Direction::UpperToLower, &inputs, 2, 5, &schedule, &oracle).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.rows[0].label, "0.00 vs 0.25");
        assert!(table.rows.iter().all(|r| r.trials == 8));
        let same = MixSchedule::new(vec![0.0, 1.0]).unwrap();
        assert!(mix_ratio_study(&bundle, Direction::LowerToUpper, &inputs, 1, 5, &same, &oracle).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn collinear(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16), alpha in 0.0f64..=1.0) {
            let a = emb(pairs.iter().map(|p| p.0).collect(), Origin::Mapped);
            let b = emb(pairs.iter().map(|p| p.1).collect(), Origin::Encoded);
            let m = mix_embeddings(&a, &b, alpha).unwrap();
            for i in 0..pairs.len() {
                let lhs = m.values[i] - a.values[i];
                let rhs = alpha * (b.values[i] - a.values[i]);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + a.values[i].abs() + b.values[i].abs()));
            }
            let perm: Vec<usize> = (0..pairs.len()).rev().collect();
            let pa = emb(perm.iter().map(|&i| a.values[i]).collect(), Origin::Mapped);
            let pb = emb(perm.iter().map(|&i| b.values[i]).collect(), Origin::Encoded);
            let pm = mix_embeddings(&pa, &pb, alpha).unwrap();
            prop_assert!(perm.iter().enumerate().all(|(k, &i)| pm.values[k] == m.values[i]));
        }
    }
}
