//! Frozen feature extractor for FID: a small conv classifier trained on
//! template × palette-family labels, read out at its 64-d penultimate layer.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fid::FeatureStats;
use crate::dataset::{GarmentAttributes, OutfitDataset, FAMILIES};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{batch_tensor, Domain, Image};
use crate::networks::Pyramid;
use crate::nn::{lrelu_gain, Linear, ParamBuilder, Params, LEAK};
use crate::optim::{Adam, OptimizerConfig};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
pub const NUM_TEMPLATES: usize = 5;
pub const NUM_CLASSES: usize = NUM_TEMPLATES * FAMILIES.len();
const CHUNK: usize = 64;

pub fn class_of(a: &GarmentAttributes) -> usize {
    a.template.index() * FAMILIES.len() + a.family.index()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub resolution: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of Gaussian pixel noise added to training inputs.
    pub noise: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self { resolution: 32, width: 8, steps: 400, batch_size: 32, learning_rate: 1e-3, noise: 0.05, seed: 0xfeed }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("evaluator resolution must be a power of two >= 8, got {}", self.resolution)));
        }
        if self.width == 0 || self.batch_size == 0 {
            return Err(Error::Config("evaluator width and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("evaluator learning rate must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEvaluator {
    pub config: EvaluatorConfig,
    pyramid: Pyramid,
    hidden: Linear,
    head: Linear,
    params: Params,
}

/// On-disk form: the recipe plus flat weights and their digest.
#[derive(Serialize, Deserialize)]
struct Stored {
    config: EvaluatorConfig,
    digest: String,
    weights: Vec<f64>,
}

impl FeatureEvaluator {
    /// Freshly initialised, untrained network.
    pub fn new(config: EvaluatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut b = ParamBuilder::new(&mut rng);
        let levels = config.levels();
        let pyramid = Pyramid::build(&mut b, "eval", 3, config.width, levels);
        let hidden = b.linear("eval.hidden", Pyramid::feature_len(config.width, levels), FEATURE_DIM, lrelu_gain());
        let head = b.linear("eval.head", FEATURE_DIM, NUM_CLASSES, 1.0);
        Ok(Self { config, pyramid, hidden, head, params: b.finish() })
    }

    /// Trains on every labelled garment of both domains.
    pub fn train_on(dataset: &OutfitDataset, config: EvaluatorConfig) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for domain in [Domain::Upper, Domain::Lower] {
            for g in dataset.garments(domain) {
                let a = g.attributes.as_ref().ok_or_else(|| Error::MissingAttributes(g.id.clone()))?;
                for view in &g.views {
                    images.push(view);
                    labels.push(class_of(a));
                }
            }
        }
        Self::train(&images, &labels, config)
    }

    pub fn train(images: &[&Image], labels: &[usize], config: EvaluatorConfig) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images for {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("class label {bad} out of range")));
        }
        let mut model = Self::new(config)?;
        let mut adam = Adam::new(
            OptimizerConfig { learning_rate: config.learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            &model.params,
        );
        let mut rng = seeded(config.seed ^ 0x7261_696e);
        let noise = Normal::new(0.0, config.noise.max(1e-12)).expect("valid std");
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for _ in 0..config.steps {
            let mut idx = Vec::with_capacity(config.batch_size);
            while idx.len() < config.batch_size.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let mut x = batch_tensor(&batch)?;
            if config.noise > 0.0 {
                x.data_mut().iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0));
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(x);
            let feat = model.forward_features(&mut g, &p, xv);
            let logits = model.head.forward(&mut g, &p, feat);
            let loss = g.softmax_cross_entropy(logits, &y);
            let grads = g.backward(loss);
            let grads = p.grads(&g, &grads);
            adam.update(&mut model.params, &grads);
        }
        Ok(model)
    }

    fn forward_features(&self, g: &mut Graph, p: &crate::nn::Bound, x: crate::graph::Var) -> crate::graph::Var {
        let f = self.pyramid.forward(g, p, x);
        let h = self.hidden.forward(g, p, f);
        g.leaky_relu(h, LEAK)
    }

    fn run(&self, images: &[&Image]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut logits = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            if let Some(bad) = chunk.iter().find(|i| i.size() != self.config.resolution) {
                return Err(Error::ResolutionMismatch(self.config.resolution, bad.size()));
            }
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(batch_tensor(chunk)?);
            let f = self.forward_features(&mut g, &p, x);
            let l = self.head.forward(&mut g, &p, f);
            let (ft, lt): (&Tensor, &Tensor) = (g.value(f), g.value(l));
            for i in 0..chunk.len() {
                feats.push(ft.row(i).to_vec());
                logits.push(lt.row(i).to_vec());
            }
        }
        Ok((feats, logits))
    }

    /// 64-d penultimate features, one row per image.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.0)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self
            .run(images)?
            .1
            .iter()
            .map(|row| (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }))
            .collect())
    }

    pub fn extract_features(&self, images: &[&Image]) -> Result<FeatureStats> {
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!("feature statistics need at least 2 images, got {}", images.len())));
        }
        FeatureStats::from_rows(&self.features(images)?)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Stored { config: self.config, digest: self.digest(), weights: self.params.flatten() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored = serde_json::from_str(text)?;
        let mut model = Self::new(stored.config)?;
        model.params.load_flat(&stored.weights).map_err(Error::CorruptCheckpoint)?;
        let found = model.digest();
        if found != stored.digest {
            return Err(Error::DigestMismatch { found, expected: stored.digest });
        }
        Ok(model)
    }
}

/// Free-function form of [`FeatureEvaluator::extract_features`].
pub fn extract_features(evaluator: &FeatureEvaluator, images: &[&Image]) -> Result<FeatureStats> {
    evaluator.extract_features(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, DatasetSpec};

    fn tiny() -> OutfitDataset {
        let mut multiplicity = std::collections::BTreeMap::new();
        multiplicity.insert(1, 24);
        generate_synthetic_dataset(&DatasetSpec { n_upper: 24, n_lower: 40, resolution: 16, multiplicity, ..DatasetSpec::default() })
            .unwrap()
    }

    fn config() -> EvaluatorConfig {
        EvaluatorConfig { resolution: 16, steps: 150, batch_size: 16, ..EvaluatorConfig::default() }
    }

    #[test]
    fn learns_training_labels() {
        let ds = tiny();
        let model = FeatureEvaluator::train_on(&ds, config()).unwrap();
        let images: Vec<&Image> = ds.uppers.iter().chain(&ds.lowers).map(|g| g.image()).collect();
        let labels: Vec<usize> = ds.uppers.iter().chain(&ds.lowers).map(|g| class_of(g.attributes.as_ref().unwrap())).collect();
        let pred = model.predict(&images).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        assert!(acc > 0.8, "train accuracy {acc}");
        assert_eq!(model.features(&images[..3]).unwrap()[0].len(), FEATURE_DIM);
    }

    #[test]
    fn stats_properties() {
        let ds = tiny();
        let model = FeatureEvaluator::new(config()).unwrap();
        let images: Vec<&Image> = ds.lowers.iter().take(12).map(|g| g.image()).collect();
        let s = model.extract_features(&images).unwrap();
        let mut shuffled = images.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let t = model.extract_features(&shuffled).unwrap();
        for (a, b) in s.cov.iter().zip(&t.cov).chain(s.mean.iter().zip(&t.mean)) {
            assert!((a - b).abs() < 1e-12);
        }
        let dup = model.extract_features(&[images[0]; 6]).unwrap();
        assert!(dup.cov.iter().all(|&v| v == 0.0));
        assert!(model.extract_features(&images[..1]).is_err());
    }

    #[test]
    fn json_round_trip_and_tamper() {
        let model = FeatureEvaluator::new(config()).unwrap();
        let text = model.to_json().unwrap();
        assert_eq!(FeatureEvaluator::from_json(&text).unwrap(), model);
        let mut stored: serde_json::Value = serde_json::from_str(&text).unwrap();
        stored["weights"][0] = serde_json::json!(123.0);
        assert!(matches!(FeatureEvaluator::from_json(&stored.to_string()), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn deterministic_training() {
        let ds = tiny();
        let cfg = EvaluatorConfig { steps: 5, ..config() };
        assert_eq!(FeatureEvaluator::train_on(&ds, cfg).unwrap().digest(), FeatureEvaluator::train_on(&ds, cfg).unwrap().digest());
    }
}
