use sha2::{Digest, Sha256};

use super::{diversity_score, fid, CompatibilityOracle, FeatureEvaluator, FeatureStats, MetricsReport, Scoreboard};
use crate::dataset::Direction;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::GeneratorBundle;

/// Per-input generation seed, keyed by the input's entity so that results do
/// not depend on input order.
pub fn input_seed(seed: u64, x: &Image) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(x.entity_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// `n` outputs for each input.
pub fn generate_outputs(bundle: &GeneratorBundle, inputs: &[&Image], n: usize, seed: u64) -> Result<Vec<Vec<Image>>> {
    inputs
        .iter()
        .map(|x| Ok(bundle.generate_batch(x, n, input_seed(seed, x))?.into_iter().map(|g| g.y).collect()))
        .collect()
}

/// Held-out material shared by every evaluated method.
pub struct EvaluationSet<'a> {
    pub direction: Direction,
    pub inputs: Vec<&'a Image>,
    pub evaluator: &'a FeatureEvaluator,
    /// Evaluator statistics of real held-out target images.
    pub reference: FeatureStats,
    pub oracle: &'a CompatibilityOracle,
}

impl EvaluationSet<'_> {
    /// Diversity, FID and oracle compatibility of `outputs` (one row per input).
    pub fn score(&self, outputs: &[Vec<Image>], config_digest: &str, seed: u64) -> Result<MetricsReport> {
        if outputs.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch { expected: self.inputs.len(), actual: outputs.len() });
        }
        let div = diversity_score(outputs)?;
        let flat: Vec<&Image> = outputs.iter().flatten().collect();
        let fid_value = fid(&self.evaluator.extract_features(&flat)?, &self.reference)?;
        let mut compat = Vec::with_capacity(flat.len());
        for (x, row) in self.inputs.iter().zip(outputs) {
            for y in row {
                compat.push(u8::from(self.oracle.is_compatible(x, y)?));
            }
        }
        let rate = compat.iter().map(|&c| c as f64).sum::<f64>() / compat.len() as f64;
        Ok(MetricsReport {
            direction: self.direction,
            diversity: div.score,
            fid: fid_value,
            f2bt: None,
            note: None,
            oracle_compat_rate: rate,
            config_digest: config_digest.to_string(),
            seed,
            diversity_per_input: div.per_input,
            compat_per_output: compat,
        })
    }

    /// Oracle score of each method's first output per input, as an F²BT board.
    pub fn scoreboard(&self, methods: &[(String, Vec<Vec<Image>>)]) -> Result<Scoreboard> {
        let mut names = Vec::with_capacity(methods.len());
        let mut scores = Vec::with_capacity(methods.len());
        for (name, outputs) in methods {
            if outputs.len() != self.inputs.len() {
                return Err(Error::DimensionMismatch { expected: self.inputs.len(), actual: outputs.len() });
            }
            let row = self
                .inputs
                .iter()
                .zip(outputs)
                .map(|(x, ys)| {
                    let y = ys.first().ok_or_else(|| Error::InvalidArgument(format!("method {name} has an empty output set")))?;
                    self.oracle.phi(x, y)
                })
                .collect::<Result<Vec<f64>>>()?;
            names.push(name.clone());
            scores.push(row);
        }
        Scoreboard::new(names, scores)
    }
}
