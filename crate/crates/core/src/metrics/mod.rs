//! Evaluation: output diversity, FID over learned features, F²BT win rates, and
//! the rule-based compatibility oracle.

mod diversity;
mod evaluation;
mod evaluator;
mod f2bt;
mod fid;
mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use diversity::{diversity_score, diversity_score_with, DiversityReport};
pub use evaluation::{generate_outputs, input_seed, EvaluationSet};
pub use evaluator::{class_of, extract_features, EvaluatorConfig, FeatureEvaluator, FEATURE_DIM, NUM_CLASSES};
pub use f2bt::{f2bt, f2bt_table, Scoreboard};
pub use fid::{fid, FeatureStats};
pub use oracle::{
    oracle_phi, rule_score, tiebreak, CompatibilityOracle, PixelAttributeReader, SoftAttributes, COMPATIBLE_THRESHOLD,
    TIEBREAK_SCALE,
};

use crate::dataset::Direction;

/// Summary of one evaluation run, with the raw per-input values it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub diversity: f64,
    pub fid: f64,
    /// Percentages per method; `None` when fewer than two methods were compared.
    pub f2bt: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub oracle_compat_rate: f64,
    pub config_digest: String,
    pub seed: u64,
    pub diversity_per_input: Vec<f64>,
    /// 1 for each generated output judged compatible with its input, else 0.
    pub compat_per_output: Vec<u8>,
}

impl MetricsReport {
    /// Recomputes the summary fields from the raw values.
    pub fn recomputed(&self) -> (f64, f64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let compat: Vec<f64> = self.compat_per_output.iter().map(|&c| c as f64).collect();
        (mean(&self.diversity_per_input), mean(&compat))
    }
}
