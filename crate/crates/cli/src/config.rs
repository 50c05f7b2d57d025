//! Flat run configuration. Every key can be overridden from the command line
//! with `--set key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use bcgan::dataset::{CompatibilityRule, DatasetSpec, Direction, DEFAULT_DEDUP_THRESHOLD};
use bcgan::losses::LossWeights;
use bcgan::metrics::EvaluatorConfig;
use bcgan::networks::Architecture;
use bcgan::optim::OptimizerConfig;
use bcgan::trainer::{Ablations, PretrainConfig, TrainConfig};
use bcgan::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    /// `upper-to-lower` or `lower-to-upper`.
    pub direction: String,
    pub seed: u64,

    pub n_upper: usize,
    pub n_lower: usize,
    pub resolution: usize,
    /// `[matches, uppers]` rows of the match-multiplicity histogram.
    pub multiplicity: Vec<[usize; 2]>,
    pub patterned_fraction: f64,
    pub dataset_seed: u64,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub dedup_threshold: f64,
    /// Directory with `upper/` and `lower/` images; when set, replaces the synthetic generator.
    pub ingest_root: Option<String>,
    pub ingest_manifest: Option<String>,

    pub latent_dim: usize,
    pub mapping_depth: usize,
    pub synthesis_width: usize,
    pub encoder_width: usize,
    pub critic_width: usize,
    pub style_disc_width: usize,

    pub pretrain_iterations: u64,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_beta1: f64,
    pub pretrain_beta2: f64,
    pub r1_gamma: f64,
    pub r1_every: u64,
    pub pretrain_seed: u64,

    pub iterations: u64,
    pub batch_size: usize,
    pub latent_codes: usize,
    pub pool_capacity: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gp_coefficient: f64,
    pub gp_every: u64,
    pub disable_div: bool,
    pub disable_dcmp: bool,
    pub disable_contrastive: bool,
    pub use_pixel_discriminator: bool,
    pub checkpoint_every: u64,

    pub eval_outputs: usize,
    pub eval_seed: u64,
    pub evaluator_width: usize,
    pub evaluator_steps: usize,
    pub evaluator_batch_size: usize,
    pub evaluator_learning_rate: f64,
    pub evaluator_noise: f64,
    pub evaluator_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ds = DatasetSpec::default();
        let arch = Architecture::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::default();
        let ev = EvaluatorConfig::default();
        Self {
            run_name: "default".into(),
            direction: "upper-to-lower".into(),
            seed: train.seed,
            n_upper: ds.n_upper,
            n_lower: ds.n_lower,
            resolution: ds.resolution,
            multiplicity: ds.multiplicity.iter().map(|(&k, &v)| [k, v]).collect(),
            patterned_fraction: ds.patterned_fraction,
            dataset_seed: ds.seed,
            split_ratio: 0.8,
            split_seed: 0,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            ingest_root: None,
            ingest_manifest: None,
            latent_dim: arch.latent_dim,
            mapping_depth: arch.mapping_depth,
            synthesis_width: arch.synthesis_width,
            encoder_width: arch.encoder_width,
            critic_width: arch.critic_width,
            style_disc_width: arch.style_disc_width,
            pretrain_iterations: pre.iterations,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.optimizer.learning_rate,
            pretrain_beta1: pre.optimizer.beta1,
            pretrain_beta2: pre.optimizer.beta2,
            r1_gamma: pre.r1_gamma,
            r1_every: pre.r1_every,
            pretrain_seed: pre.seed,
            iterations: train.iterations,
            batch_size: train.batch_size,
            latent_codes: train.latent_codes,
            pool_capacity: train.pool_capacity,
            lambda1: train.weights.lambda1,
            lambda2: train.weights.lambda2,
            learning_rate: train.optimizer.learning_rate,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            epsilon: train.optimizer.epsilon,
            gp_coefficient: train.gp_coefficient,
            gp_every: train.gp_every,
            disable_div: false,
            disable_dcmp: false,
            disable_contrastive: false,
            use_pixel_discriminator: false,
            checkpoint_every: 500,
            eval_outputs: 10,
            eval_seed: 2024,
            evaluator_width: ev.width,
            evaluator_steps: ev.steps,
            evaluator_batch_size: ev.batch_size,
            evaluator_learning_rate: ev.learning_rate,
            evaluator_noise: ev.noise,
            evaluator_seed: ev.seed,
        }
    }
}

/// Keys that set run length or bookkeeping only; they do not enter the digest.
const UNHASHED: [&str; 4] = ["run_name", "iterations", "pretrain_iterations", "checkpoint_every"];

/// Keys that shape the dataset and its split.
const DATA_KEYS: [&str; 12] = [
    "direction",
    "n_upper",
    "n_lower",
    "resolution",
    "multiplicity",
    "patterned_fraction",
    "dataset_seed",
    "split_ratio",
    "split_seed",
    "dedup_threshold",
    "ingest_root",
    "ingest_manifest",
];

impl RunConfig {
    /// Reads a TOML file (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name.starts_with('.') {
            return Err(Error::Config(format!("run_name {:?} is not a plain directory name", self.run_name)));
        }
        self.direction()?;
        if self.ingest_root.is_some() != self.ingest_manifest.is_some() {
            return Err(Error::Config("ingest_root and ingest_manifest must be given together".into()));
        }
        if self.eval_outputs < 2 {
            return Err(Error::Config("eval_outputs must be at least 2".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.architecture().validate()?;
        self.pretrain_config().validate()?;
        self.train_config()?.validate()?;
        self.evaluator_config().validate()?;
        Ok(())
    }

    pub fn direction(&self) -> Result<Direction, Error> {
        self.direction.parse()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_upper: self.n_upper,
            n_lower: self.n_lower,
            multiplicity: self.multiplicity.iter().map(|&[k, v]| (k, v)).collect::<BTreeMap<_, _>>(),
            rule: CompatibilityRule::standard(),
            seed: self.dataset_seed,
            resolution: self.resolution,
            patterned_fraction: self.patterned_fraction,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            latent_dim: self.latent_dim,
            resolution: self.resolution,
            mapping_depth: self.mapping_depth,
            synthesis_width: self.synthesis_width,
            encoder_width: self.encoder_width,
            critic_width: self.critic_width,
            style_disc_width: self.style_disc_width,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            batch_size: self.pretrain_batch_size,
            optimizer: OptimizerConfig {
                learning_rate: self.pretrain_learning_rate,
                beta1: self.pretrain_beta1,
                beta2: self.pretrain_beta2,
                epsilon: self.epsilon,
            },
            r1_gamma: self.r1_gamma,
            r1_every: self.r1_every,
            seed: self.pretrain_seed,
        }
    }

    pub fn ablations(&self) -> Ablations {
        Ablations {
            disable_div: self.disable_div,
            disable_dcmp: self.disable_dcmp,
            disable_contrastive: self.disable_contrastive,
            use_pixel_discriminator: self.use_pixel_discriminator,
        }
    }

    pub fn set_ablations(&mut self, ab: Ablations) {
        self.disable_div = ab.disable_div;
        self.disable_dcmp = ab.disable_dcmp;
        self.disable_contrastive = ab.disable_contrastive;
        self.use_pixel_discriminator = ab.use_pixel_discriminator;
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        Ok(TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            latent_codes: self.latent_codes,
            pool_capacity: self.pool_capacity,
            weights: LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 },
            ablations: self.ablations(),
            optimizer: OptimizerConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon },
            gp_coefficient: self.gp_coefficient,
            gp_every: self.gp_every,
            seed: self.seed,
            direction: self.direction()?,
        })
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            resolution: self.resolution,
            width: self.evaluator_width,
            steps: self.evaluator_steps,
            batch_size: self.evaluator_batch_size,
            learning_rate: self.evaluator_learning_rate,
            noise: self.evaluator_noise,
            seed: self.evaluator_seed,
        }
    }

    /// Name of the training variant, used for its output directory.
    pub fn variant(&self) -> String {
        let ab = self.ablations();
        let names: Vec<&str> = [
            (ab.disable_div, "no-div"),
            (ab.disable_dcmp, "no-dcmp"),
            (ab.disable_contrastive, "no-contrastive"),
            (ab.use_pixel_discriminator, "pixel"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }

    /// Hash of every setting except run length and naming. Independent of key order
    /// in the source file.
    pub fn digest(&self) -> String {
        self.digest_of(|k| !UNHASHED.contains(&k))
    }

    /// Hash of the settings that determine the dataset, split and evaluator.
    pub fn data_digest(&self) -> String {
        self.digest_of(|k| DATA_KEYS.contains(&k))
    }

    fn digest_of(&self, keep: impl Fn(&str) -> bool) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let map: BTreeMap<String, serde_json::Value> =
            value.as_object().expect("struct").iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        digest_value(&map)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// SHA-256 of a value's JSON form.
pub fn digest_value<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("value serialises")))
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn digest_ignores_key_order_and_run_length() {
        let a = "seed = 3\nlambda2 = 2.0\niterations = 10\n";
        let b = "iterations = 99\nlambda2 = 2.0\nseed = 3\n";
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.toml"), dir.path().join("b.toml"));
        std::fs::write(&pa, a).unwrap();
        std::fs::write(&pb, b).unwrap();
        let ca = RunConfig::load(Some(&pa), &[]).unwrap();
        let cb = RunConfig::load(Some(&pb), &[]).unwrap();
        assert_ne!(ca, cb);
        assert_eq!(ca.digest(), cb.digest());
        assert_ne!(ca.digest(), RunConfig::default().digest());
        assert_eq!(ca.data_digest(), RunConfig::default().data_digest());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["lambda1=0.5".into(), "direction=lower-to-upper".into(), "disable_div=true".into()]).unwrap();
        assert_eq!(cfg.lambda1, 0.5);
        assert_eq!(cfg.direction().unwrap(), Direction::LowerToUpper);
        assert_eq!(cfg.variant(), "no-div");
        assert!(matches!(RunConfig::load(None, &["lambda3=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["seed=abc".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["noequals".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["direction=sideways".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn multiplicity_maps_to_histogram() {
        let cfg = RunConfig::load(None, &["multiplicity=[[1, 60], [2, 40]]".into()]).unwrap();
        assert_eq!(cfg.dataset_spec().multiplicity, BTreeMap::from([(1, 60), (2, 40)]));
    }
}
