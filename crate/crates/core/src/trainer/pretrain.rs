use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{digest_json, guard, load_adam, load_params, push_adam, push_params, rng_from_meta, rng_to_meta};
use crate::checkpoint::{Checkpoint, Stage};
use crate::discriminators::{directional_slopes, PixelDiscriminator};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{batch_tensor, Domain, Image};
use crate::losses::{adv_graph, dse_graph};
use crate::networks::{Architecture, GeneratorBundle};
use crate::nn::grad_norm;
use crate::optim::{Adam, OptimizerConfig};
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Weight of the real-image gradient penalty `γ/2·E‖∇D‖²`.
    pub r1_gamma: f64,
    /// Apply the penalty every this many iterations (scaled up accordingly).
    pub r1_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 16,
            optimizer: OptimizerConfig { learning_rate: 2e-3, ..OptimizerConfig::default() },
            r1_gamma: 1.0,
            r1_every: 4,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.r1_every == 0 {
            return Err(Error::Config("pre-training batch size and r1_every must be positive".into()));
        }
        if !(self.r1_gamma >= 0.0) {
            return Err(Error::Config("r1_gamma must be non-negative".into()));
        }
        Ok(())
    }

    /// Hash of everything except the run length.
    pub fn digest(&self, arch: &Architecture, target: Domain) -> String {
        digest_json(&(Self { iterations: 0, ..self.clone() }, arch, target))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub iter: u64,
    pub dis: f64,
    pub adv: f64,
    pub r1: f64,
    pub grad_norms: BTreeMap<String, f64>,
    pub ms: f64,
}

/// Unconditional GAN on target-domain images with a pixel discriminator.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub config_digest: String,
    pub bundle: GeneratorBundle,
    pub discriminator: PixelDiscriminator,
    images: Vec<Image>,
    opt_f: Adam,
    opt_g: Adam,
    opt_d: Adam,
    rng: SeededRng,
    iteration: u64,
}

impl Pretrainer {
    pub fn new(arch: Architecture, target: Domain, images: Vec<Image>, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        check_images(&images, &arch, target)?;
        let bundle = GeneratorBundle::new(arch.clone(), target, config.seed)?;
        let discriminator = PixelDiscriminator::new(&arch, config.seed ^ 0xd15c);
        let opt_f = Adam::new(config.optimizer, &bundle.f);
        let opt_g = Adam::new(config.optimizer, &bundle.g);
        let opt_d = Adam::new(config.optimizer, &discriminator.critic.params);
        let config_digest = config.digest(&arch, target);
        let rng = seeded(config.seed ^ 0x9e37_79b9);
        Ok(Self { config, config_digest, bundle, discriminator, images, opt_f, opt_g, opt_d, rng, iteration: 0 })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn latents(&mut self, n: usize) -> Tensor {
        let l = self.bundle.arch.latent_dim;
        Tensor::new(vec![n, l], (0..n * l).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect())
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<PretrainRecord> {
        let start = Instant::now();
        let snapshot = self.clone();
        let out = self.step_inner(start);
        if out.is_err() {
            *self = snapshot;
        }
        out
    }

    fn step_inner(&mut self, start: Instant) -> Result<PretrainRecord> {
        let it = self.iteration;
        let b = self.config.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.images.len())).collect();
        let real = batch_tensor(&idx.iter().map(|&i| &self.images[i]).collect::<Vec<_>>())?;
        let mut norms = BTreeMap::new();

        // Discriminator.
        let z = self.latents(b);
        let fake = {
            let mut g = Graph::new();
            let f = self.bundle.f.bind(&mut g, false);
            let p = self.bundle.g.bind(&mut g, false);
            let w = self.bundle.map_graph(&mut g, &f, &z);
            let y = self.bundle.synthesis.forward(&mut g, &p, w);
            g.value(y).clone()
        };
        let critic = &self.discriminator.critic;
        let mut g = Graph::new();
        let p = critic.params.bind(&mut g, true);
        let both = g.constant(Tensor::concat_batch(&[&real, &fake]));
        let logits = critic.forward(&mut g, &p, both);
        let lr = g.select(logits, &(0..b).collect::<Vec<_>>());
        let lf = g.select(logits, &(b..2 * b).collect::<Vec<_>>());
        let dis = dse_graph(&mut g, lr, lf);
        let mut loss = dis;
        let mut r1 = 0.0;
        if self.config.r1_gamma > 0.0 && it.is_multiple_of(self.config.r1_every) {
            let slopes = directional_slopes(&mut g, &p, &critic.params, |g, p, x| critic.forward(g, p, x), &real, 1e-3);
            let sq = g.square(slopes);
            let m = g.mean(sq);
            let pen = g.scale(m, 0.5 * self.config.r1_gamma * self.config.r1_every as f64);
            r1 = g.value(pen).item();
            loss = g.add(loss, pen);
        }
        let dis_value = guard(it, "discriminator", g.value(dis).item())?;
        guard(it, "r1", r1)?;
        let grads = g.backward(loss);
        let grads = p.grads(&g, &grads);
        norms.insert("dpix".to_string(), grad_norm(&grads));
        self.opt_d.update(&mut self.discriminator.critic.params, &grads);

        // Generator: mapping and synthesis.
        let z = self.latents(b);
        let critic = &self.discriminator.critic;
        let mut g = Graph::new();
        let f = self.bundle.f.bind(&mut g, true);
        let sp = self.bundle.g.bind(&mut g, true);
        let dp = critic.params.bind(&mut g, false);
        let w = self.bundle.map_graph(&mut g, &f, &z);
        let y = self.bundle.synthesis.forward(&mut g, &sp, w);
        let logits = critic.forward(&mut g, &dp, y);
        let adv = adv_graph(&mut g, logits);
        let adv_value = guard(it, "generator", g.value(adv).item())?;
        let grads = g.backward(adv);
        let gf = f.grads(&g, &grads);
        let gg = sp.grads(&g, &grads);
        norms.insert("f".to_string(), grad_norm(&gf));
        norms.insert("g".to_string(), grad_norm(&gg));
        self.opt_f.update(&mut self.bundle.f, &gf);
        self.opt_g.update(&mut self.bundle.g, &gg);

        self.iteration += 1;
        Ok(PretrainRecord { iter: it, dis: dis_value, adv: adv_value, r1, grad_norms: norms, ms: start.elapsed().as_secs_f64() * 1e3 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        let mut meta = serde_json::Map::new();
        push_params(&mut arrays, "f", &self.bundle.f);
        push_params(&mut arrays, "g", &self.bundle.g);
        push_params(&mut arrays, "e", &self.bundle.e);
        push_params(&mut arrays, "dpix", &self.discriminator.critic.params);
        push_adam(&mut arrays, &mut meta, "f", &self.opt_f);
        push_adam(&mut arrays, &mut meta, "g", &self.opt_g);
        push_adam(&mut arrays, &mut meta, "dpix", &self.opt_d);
        meta.insert("architecture".into(), serde_json::to_value(&self.bundle.arch).expect("serialisable"));
        meta.insert("target".into(), serde_json::to_value(self.bundle.target).expect("serialisable"));
        meta.insert("config".into(), serde_json::to_value(&self.config).expect("serialisable"));
        meta.insert("rng".into(), rng_to_meta(&self.rng));
        Checkpoint {
            stage: Stage::Pretrain,
            iteration: self.iteration,
            config_digest: self.config_digest.clone(),
            frozen_digest: self.bundle.frozen_digest(),
            meta: meta.into(),
            arrays,
        }
    }

    /// Restores a session; `images` must be the same training set.
    pub fn from_checkpoint(ck: &Checkpoint, images: Vec<Image>) -> Result<Self> {
        if ck.stage != Stage::Pretrain {
            return Err(Error::CorruptCheckpoint("not a pre-training checkpoint".into()));
        }
        let arch: Architecture = ck.meta_field("architecture")?;
        let target: Domain = ck.meta_field("target")?;
        let config: PretrainConfig = ck.meta_field("config")?;
        let mut t = Self::new(arch, target, images, config)?;
        ck.require_digest(&t.config_digest)?;
        load_params(ck, "f", &mut t.bundle.f)?;
        load_params(ck, "g", &mut t.bundle.g)?;
        load_params(ck, "e", &mut t.bundle.e)?;
        load_params(ck, "dpix", &mut t.discriminator.critic.params)?;
        t.opt_f = load_adam(ck, "f", &t.bundle.f)?;
        t.opt_g = load_adam(ck, "g", &t.bundle.g)?;
        t.opt_d = load_adam(ck, "dpix", &t.discriminator.critic.params)?;
        t.rng = rng_from_meta(ck, "rng")?;
        t.iteration = ck.iteration;
        Ok(t)
    }
}

fn check_images(images: &[Image], arch: &Architecture, target: Domain) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Data("pre-training needs at least one target-domain image".into()));
    }
    for img in images {
        if img.domain != target {
            return Err(Error::DomainMismatch { expected: target, actual: img.domain });
        }
        if img.size() != arch.resolution {
            return Err(Error::ResolutionMismatch(arch.resolution, img.size()));
        }
    }
    Ok(())
}

/// Runs `config.iterations` steps and returns the trained bundle.
pub fn pretrain_target_gan(arch: Architecture, target: Domain, images: Vec<Image>, config: PretrainConfig) -> Result<GeneratorBundle> {
    let mut t = Pretrainer::new(arch, target, images, config)?;
    for _ in 0..t.config.iterations {
        t.step()?;
    }
    Ok(t.bundle)
}

/// Generator bundle stored in a checkpoint of either stage.
pub fn bundle_from_checkpoint(ck: &Checkpoint) -> Result<GeneratorBundle> {
    let arch: Architecture = ck.meta_field("architecture")?;
    let target: Domain = ck.meta_field("target")?;
    let mut b = GeneratorBundle::new(arch, target, 0)?;
    load_params(ck, "f", &mut b.f)?;
    load_params(ck, "g", &mut b.g)?;
    load_params(ck, "e", &mut b.e)?;
    if b.frozen_digest() != ck.frozen_digest {
        return Err(Error::CorruptCheckpoint("generator weights do not match the recorded frozen digest".into()));
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            latent_dim: 8,
            resolution: 8,
            mapping_depth: 2,
            synthesis_width: 8,
            encoder_width: 4,
            critic_width: 4,
            style_disc_width: 8,
        }
    }

    fn images() -> Vec<Image> {
        (0..6).map(|i| Image::filled(8, Domain::Lower, format!("l{i}"), [0.1 * i as f64, 0.5, 0.9])).collect()
    }

    fn config() -> PretrainConfig {
        PretrainConfig { iterations: 4, batch_size: 4, r1_every: 2, seed: 3, ..PretrainConfig::default() }
    }

    fn untimed(mut r: PretrainRecord) -> PretrainRecord {
        r.ms = 0.0;
        r
    }

    #[test]
    fn resume_is_exact() {
        let mut straight = Pretrainer::new(arch(), Domain::Lower, images(), config()).unwrap();
        let expected: Vec<_> = (0..4).map(|_| untimed(straight.step().unwrap())).collect();
        assert!(expected[0].r1 > 0.0 && expected[1].r1 == 0.0);

        let mut first = Pretrainer::new(arch(), Domain::Lower, images(), config()).unwrap();
        let mut got: Vec<_> = (0..2).map(|_| untimed(first.step().unwrap())).collect();
        let ck = Checkpoint::decode(&first.to_checkpoint().encode().unwrap()).unwrap();
        let mut second = Pretrainer::from_checkpoint(&ck, images()).unwrap();
        got.extend((0..2).map(|_| untimed(second.step().unwrap())));
        assert_eq!(got, expected);
        assert_eq!(second.to_checkpoint().encode().unwrap(), straight.to_checkpoint().encode().unwrap());
    }

    #[test]
    fn generator_weights_move_and_load_back() {
        let mut t = Pretrainer::new(arch(), Domain::Lower, images(), config()).unwrap();
        let before = t.bundle.frozen_digest();
        t.step().unwrap();
        assert_ne!(t.bundle.frozen_digest(), before);
        let loaded = bundle_from_checkpoint(&t.to_checkpoint()).unwrap();
        assert_eq!(loaded.frozen_digest(), t.bundle.frozen_digest());

        let mut tampered = t.to_checkpoint();
        tampered.arrays.iter_mut().find(|(n, _)| n == "g").unwrap().1[0] += 1.0;
        assert!(bundle_from_checkpoint(&tampered).is_err());
    }

    #[test]
    fn digest_ignores_run_length() {
        let a = config();
        let b = PretrainConfig { iterations: 9999, ..config() };
        assert_eq!(a.digest(&arch(), Domain::Lower), b.digest(&arch(), Domain::Lower));
        let c = PretrainConfig { seed: 4, ..config() };
        assert_ne!(a.digest(&arch(), Domain::Lower), c.digest(&arch(), Domain::Lower));
    }

    #[test]
    fn rejects_wrong_images() {
        let uppers: Vec<Image> = (0..3).map(|i| Image::filled(8, Domain::Upper, format!("u{i}"), [0.5; 3])).collect();
        assert!(matches!(Pretrainer::new(arch(), Domain::Lower, uppers, config()), Err(Error::DomainMismatch { .. })));
        let big = vec![Image::filled(16, Domain::Lower, "x", [0.5; 3])];
        assert!(Pretrainer::new(arch(), Domain::Lower, big, config()).is_err());
        assert!(Pretrainer::new(arch(), Domain::Lower, vec![], config()).is_err());
    }
}
