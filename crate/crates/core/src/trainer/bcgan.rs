use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{digest_json, guard, load_adam, load_params, push_adam, push_params, rng_from_meta, rng_to_meta, Ablations, StepRecord};
use crate::checkpoint::{Checkpoint, Stage};
use crate::dataset::{Direction, OutfitDataset, SplitManifest};
use crate::discriminators::{gradient_penalty, interpolate_rows, CompatibilityCritic, EmbeddingPool, NegativeSampler, PixelDiscriminator, StyleDiscriminator};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{batch_tensor, Image};
use crate::losses::{adv_graph, cmp_dis_graph, cmp_dis_plain_graph, cmp_graph, cmp_plain_graph, default_extractor, div_graph, dse_graph, total_graph, LossWeights};
use crate::networks::{stack_pair, GeneratorBundle};
use crate::nn::{grad_norm, Bound};
use crate::optim::{Adam, OptimizerConfig};
use crate::perceptual::PerceptualExtractor;
use crate::rng::{seeded, RngState, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Latent codes per given item.
    pub latent_codes: usize,
    pub pool_capacity: usize,
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub optimizer: OptimizerConfig,
    pub gp_coefficient: f64,
    /// Apply the critic's gradient penalty every this many iterations (scaled up accordingly).
    pub gp_every: u64,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 4,
            latent_codes: 2,
            pool_capacity: 100,
            weights: LossWeights::default(),
            ablations: Ablations::default(),
            optimizer: OptimizerConfig::default(),
            gp_coefficient: 10.0,
            gp_every: 1,
            seed: 1,
            direction: Direction::UpperToLower,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.latent_codes == 0 || self.gp_every == 0 {
            return Err(Error::Config("batch_size, latent_codes and gp_every must be positive".into()));
        }
        if !self.ablations.disable_div && self.latent_codes < 2 {
            return Err(Error::Config("the diversity loss needs latent_codes >= 2".into()));
        }
        if !self.ablations.disable_dcmp && self.batch_size < 2 {
            return Err(Error::Config("the compatibility critic needs batch_size >= 2".into()));
        }
        if !(self.gp_coefficient >= 0.0) {
            return Err(Error::Config("gp_coefficient must be non-negative".into()));
        }
        Ok(())
    }

    /// Hash of everything except the run length.
    pub fn digest(&self) -> String {
        digest_json(&Self { iterations: 0, ..self.clone() })
    }

    /// `(lambda1, lambda2)` after ablations.
    pub fn effective_weights(&self) -> (f64, f64) {
        let l1 = if self.ablations.disable_div { 0.0 } else { self.weights.lambda1 };
        let l2 = if self.ablations.disable_dcmp { 0.0 } else { self.weights.lambda2 };
        (l1, l2)
    }
}

/// Training pairs of one split, grouped by given item.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub direction: Direction,
    pub sources: Vec<Image>,
    /// Indices into `targets` matched with each source.
    pub matches: Vec<Vec<usize>>,
    pub targets: Vec<Image>,
    target_index: HashMap<String, usize>,
    sampler: NegativeSampler,
}

impl TrainingData {
    pub fn from_split(ds: &OutfitDataset, split: &SplitManifest) -> Result<Self> {
        let direction = split.direction;
        let (sd, td) = (direction.source(), direction.target());
        let pairs = split.train(&ds.pairs);
        let sampler = NegativeSampler::new(&pairs, sd);
        let mut targets = Vec::new();
        let mut target_index = HashMap::new();
        for id in sampler.targets() {
            let g = ds.garment(td, id).ok_or_else(|| Error::Data(format!("unknown {} item {id}", td.dir_name())))?;
            target_index.insert(id.clone(), targets.len());
            targets.push(g.image().clone());
        }
        let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for p in &pairs {
            by_source.entry(p.item(sd)).or_default().push(target_index[p.item(td)]);
        }
        let mut sources = Vec::new();
        let mut matches = Vec::new();
        for (id, m) in by_source {
            let g = ds.garment(sd, id).ok_or_else(|| Error::Data(format!("unknown {} item {id}", sd.dir_name())))?;
            sources.push(g.image().clone());
            matches.push(m);
        }
        if sources.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Self { direction, sources, matches, targets, target_index, sampler })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    fn negative(&self, source: usize, rng: &mut SeededRng) -> Result<&Image> {
        let id = self.sampler.sample(&self.sources[source].entity_id, rng)?;
        Ok(&self.targets[self.target_index[&id]])
    }
}

/// Tensors for one generator step. Rows of the `n`-expanded tensors are
/// input-major: row `i·n + k` is latent `k` of given item `i`.
#[derive(Clone, Debug)]
pub struct GeneratorBatch {
    pub x: Tensor,
    pub y_real: Tensor,
    pub x_rep: Tensor,
    pub w_orig: Tensor,
    pub y_orig: Tensor,
    pub n: usize,
    /// Index of each given item in the training data.
    pub sources: Vec<usize>,
    /// Cyclic offset choosing the other given item for fake-incompatible pairs.
    pub shift: usize,
}

impl GeneratorBatch {
    pub fn inputs(&self) -> usize {
        self.x.batch()
    }

    /// Row indices of outputs conditioned on the shifted given item.
    pub fn shifted_rows(&self) -> Vec<usize> {
        let b = self.inputs();
        (0..b).flat_map(|i| (0..self.n).map(move |k| ((i + self.shift) % b) * self.n + k)).collect()
    }
}

/// Graph handles of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub w: Var,
    pub y: Var,
    pub adv: Var,
    pub div: Option<Var>,
    pub cmp: Option<Var>,
    pub total: Var,
}

/// Critics needed to score generator outputs.
pub struct Critics<'a> {
    pub dse: &'a StyleDiscriminator,
    pub dcmp: &'a CompatibilityCritic,
    pub dpix: &'a PixelDiscriminator,
}

/// Builds `adv + λ1·div + λ2·cmp` for the encoder bound as `e`. Mapping,
/// synthesis and critic weights enter as constants.
pub fn generator_objective(
    g: &mut Graph,
    bundle: &GeneratorBundle,
    e: &Bound,
    critics: &Critics<'_>,
    batch: &GeneratorBatch,
    config: &TrainConfig,
    extractor: &PerceptualExtractor,
) -> GeneratorTerms {
    let ab = config.ablations;
    let pin = g.constant(stack_pair(&batch.x_rep, &batch.y_orig));
    let w = bundle.encoder.forward(g, e, pin);
    let sp = bundle.g.bind(g, false);
    let y = bundle.synthesis.forward(g, &sp, w);
    let adv = if ab.use_pixel_discriminator {
        let dp = critics.dpix.critic.params.bind(g, false);
        let logits = critics.dpix.critic.forward(g, &dp, y);
        adv_graph(g, logits)
    } else {
        let dp = critics.dse.params.bind(g, false);
        let logits = critics.dse.forward(g, &dp, w);
        adv_graph(g, logits)
    };
    let div = (!ab.disable_div).then(|| div_graph(g, extractor, y, batch.n));
    let cmp = (!ab.disable_dcmp).then(|| {
        let b = batch.inputs();
        let bn = b * batch.n;
        let rc = g.constant(stack_pair(&batch.x, &batch.y_real));
        let xr = g.constant(batch.x_rep.clone());
        let fc = g.concat_features(&[xr, y]);
        let y_other = g.select(y, &batch.shifted_rows());
        let fnc = g.concat_features(&[xr, y_other]);
        let cp = critics.dcmp.critic.params.bind(g, false);
        let all = g.concat_batch(&[rc, fc, fnc]);
        let s = critics.dcmp.critic.forward(g, &cp, all);
        let s_rc = g.select(s, &(0..b).collect::<Vec<_>>());
        let s_fc = g.select(s, &(b..b + bn).collect::<Vec<_>>());
        let s_fnc = g.select(s, &(b + bn..b + 2 * bn).collect::<Vec<_>>());
        if ab.disable_contrastive {
            cmp_plain_graph(g, s_fc, s_rc)
        } else {
            cmp_graph(g, s_fc, s_rc, s_fnc)
        }
    });
    let (l1, l2) = config.effective_weights();
    let total = total_graph(g, adv, div, cmp, &LossWeights { lambda1: l1, lambda2: l2 });
    GeneratorTerms { w, y, adv, div, cmp, total }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    StyleDiscriminator,
    PixelDiscriminator,
    CompatibilityCritic,
    Encoder,
}

/// Instrumentation of the update order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCounters {
    pub discriminator: u64,
    pub critic: u64,
    pub encoder: u64,
    /// Updates of the most recent iteration, in execution order.
    pub last_order: Vec<StepKind>,
}

#[derive(Clone, Debug)]
struct State {
    bundle: GeneratorBundle,
    dse: StyleDiscriminator,
    dcmp: CompatibilityCritic,
    dpix: PixelDiscriminator,
    opt_e: Adam,
    opt_dse: Adam,
    opt_dcmp: Adam,
    opt_dpix: Adam,
    pool: EmbeddingPool,
    rng: SeededRng,
    iteration: u64,
    counters: StepCounters,
}

/// The adversarial loop. Only `e`, the embedding discriminator (or pixel
/// discriminator) and the pair critic are updated.
#[derive(Clone, Debug)]
pub struct BcganTrainer {
    pub config: TrainConfig,
    pub config_digest: String,
    data: TrainingData,
    state: State,
    initial_frozen_digest: String,
}

impl BcganTrainer {
    /// Starts from a pre-trained bundle; the encoder is re-initialised from the run seed.
    pub fn new(mut bundle: GeneratorBundle, data: TrainingData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.direction != config.direction {
            return Err(Error::Config(format!("training data is {:?} but the run is {:?}", data.direction, config.direction)));
        }
        if bundle.target != config.direction.target() {
            return Err(Error::DomainMismatch { expected: config.direction.target(), actual: bundle.target });
        }
        if data.sources[0].size() != bundle.arch.resolution {
            return Err(Error::ResolutionMismatch(bundle.arch.resolution, data.sources[0].size()));
        }
        if data.len() < config.batch_size {
            return Err(Error::Data(format!("{} given items cannot fill a batch of {}", data.len(), config.batch_size)));
        }
        let seed = config.seed;
        bundle.reinit_encoder(seed ^ 0xe11c);
        let arch = bundle.arch.clone();
        let dse = StyleDiscriminator::new(&arch, seed ^ 0xd5e);
        let dcmp = CompatibilityCritic::new(&arch, config.direction.source(), seed ^ 0xc3b);
        let dpix = PixelDiscriminator::new(&arch, seed ^ 0xd1f);
        let o = config.optimizer;
        let state = State {
            opt_e: Adam::new(o, &bundle.e),
            opt_dse: Adam::new(o, &dse.params),
            opt_dcmp: Adam::new(o, &dcmp.critic.params),
            opt_dpix: Adam::new(o, &dpix.critic.params),
            pool: EmbeddingPool::new(config.pool_capacity, seed ^ 0x9001),
            rng: seeded(seed ^ 0x7a11),
            iteration: 0,
            counters: StepCounters::default(),
            bundle,
            dse,
            dcmp,
            dpix,
        };
        let initial_frozen_digest = state.bundle.frozen_digest();
        Ok(Self { config_digest: config.digest(), config, data, state, initial_frozen_digest })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn bundle(&self) -> &GeneratorBundle {
        &self.state.bundle
    }

    pub fn counters(&self) -> &StepCounters {
        &self.state.counters
    }

    pub fn pool(&self) -> &EmbeddingPool {
        &self.state.pool
    }

    pub fn critics(&self) -> Critics<'_> {
        Critics { dse: &self.state.dse, dcmp: &self.state.dcmp, dpix: &self.state.dpix }
    }

    pub fn initial_frozen_digest(&self) -> &str {
        &self.initial_frozen_digest
    }

    /// Content hash of the trainable parameter sets, keyed by network.
    pub fn trainable_digests(&self) -> BTreeMap<&'static str, String> {
        let s = &self.state;
        BTreeMap::from([
            ("e", s.bundle.e.digest()),
            ("dse", s.dse.params.digest()),
            ("dcmp", s.dcmp.critic.params.digest()),
            ("dpix", s.dpix.critic.params.digest()),
        ])
    }

    /// Draws a batch of distinct given items with one match each, plus latents.
    pub fn sample_batch(&mut self) -> Result<GeneratorBatch> {
        let (b, n) = (self.config.batch_size, self.config.latent_codes);
        let s = &mut self.state;
        let picks: Vec<usize> = sample(&mut s.rng, self.data.len(), b).into_vec();
        let matched: Vec<usize> = picks
            .iter()
            .map(|&i| {
                let m = &self.data.matches[i];
                m[s.rng.random_range(0..m.len())]
            })
            .collect();
        let x = batch_tensor(&picks.iter().map(|&i| &self.data.sources[i]).collect::<Vec<_>>())?;
        let y_real = batch_tensor(&matched.iter().map(|&i| &self.data.targets[i]).collect::<Vec<_>>())?;
        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let x_rep = x.select(&rep);
        let l = s.bundle.arch.latent_dim;
        let z = Tensor::new(vec![b * n, l], (0..b * n * l).map(|_| s.rng.sample::<f64, _>(StandardNormal)).collect());
        let shift = if b > 1 { s.rng.random_range(1..b) } else { 0 };
        let (w_orig, y_orig) = {
            let mut g = Graph::new();
            let f = s.bundle.f.bind(&mut g, false);
            let p = s.bundle.g.bind(&mut g, false);
            let w = s.bundle.map_graph(&mut g, &f, &z);
            let y = s.bundle.synthesis.forward(&mut g, &p, w);
            (g.value(w).clone(), g.value(y).clone())
        };
        Ok(GeneratorBatch { x, y_real, x_rep, w_orig, y_orig, n, sources: picks, shift })
    }

    /// One iteration: discriminator, then pair critic, then encoder. On
    /// divergence the state is rolled back to the start of the iteration.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let snapshot = self.state.clone();
        let out = self.step_inner(start);
        if out.is_err() {
            self.state = snapshot;
        }
        out
    }

    fn step_inner(&mut self, start: Instant) -> Result<StepRecord> {
        let it = self.state.iteration;
        let cfg = self.config.clone();
        let ab = cfg.ablations;
        let batch = self.sample_batch()?;
        let (b, n) = (batch.inputs(), batch.n);
        let bn = b * n;
        let mut norms = BTreeMap::new();
        let mut order = Vec::with_capacity(3);

        // Fake embeddings and images under the current encoder.
        let (w_fake, y_fake) = {
            let s = &self.state;
            let mut g = Graph::new();
            let e = s.bundle.e.bind(&mut g, false);
            let pin = g.constant(stack_pair(&batch.x_rep, &batch.y_orig));
            let w = s.bundle.encoder.forward(&mut g, &e, pin);
            let sp = s.bundle.g.bind(&mut g, false);
            let y = s.bundle.synthesis.forward(&mut g, &sp, w);
            (g.value(w).clone(), g.value(y).clone())
        };

        // (1) Real/fake discriminator.
        let dis = if ab.use_pixel_discriminator {
            let s = &mut self.state;
            let critic = &s.dpix.critic;
            let mut g = Graph::new();
            let p = critic.params.bind(&mut g, true);
            let both = g.constant(Tensor::concat_batch(&[&batch.y_real, &y_fake]));
            let logits = critic.forward(&mut g, &p, both);
            let lr = g.select(logits, &(0..b).collect::<Vec<_>>());
            let lf = g.select(logits, &(b..b + bn).collect::<Vec<_>>());
            let loss = dse_graph(&mut g, lr, lf);
            let v = guard(it, "pixel discriminator", g.value(loss).item())?;
            let grads = g.backward(loss);
            let grads = p.grads(&g, &grads);
            norms.insert("dpix".to_string(), grad_norm(&grads));
            s.opt_dpix.update(&mut s.dpix.critic.params, &grads);
            order.push(StepKind::PixelDiscriminator);
            v
        } else {
            let s = &mut self.state;
            let l = s.bundle.arch.latent_dim;
            let pooled: Vec<f64> = (0..bn).flat_map(|i| s.pool.exchange(w_fake.row(i).to_vec())).collect();
            let mut g = Graph::new();
            let p = s.dse.params.bind(&mut g, true);
            let real = g.constant(batch.w_orig.clone());
            let fake = g.constant(Tensor::new(vec![bn, l], pooled));
            let lr = s.dse.forward(&mut g, &p, real);
            let lf = s.dse.forward(&mut g, &p, fake);
            let loss = dse_graph(&mut g, lr, lf);
            let v = guard(it, "style discriminator", g.value(loss).item())?;
            let grads = g.backward(loss);
            let grads = p.grads(&g, &grads);
            norms.insert("dse".to_string(), grad_norm(&grads));
            s.opt_dse.update(&mut s.dse.params, &grads);
            order.push(StepKind::StyleDiscriminator);
            v
        };
        self.state.counters.discriminator += 1;

        // (2) Pair critic on real-compatible, real-incompatible and fake pairs.
        let (mut cmp_dis, mut gp) = (0.0, 0.0);
        if !ab.disable_dcmp {
            let negatives: Vec<Image> = {
                let s = &mut self.state;
                let mut out = Vec::with_capacity(b);
                for &src in &batch.sources {
                    out.push(self.data.negative(src, &mut s.rng)?.clone());
                }
                out
            };
            let s = &mut self.state;
            let y_neg = batch_tensor(&negatives.iter().collect::<Vec<_>>())?;
            let rc = stack_pair(&batch.x, &batch.y_real);
            let rnc = stack_pair(&batch.x, &y_neg);
            let fc = stack_pair(&batch.x_rep, &y_fake);
            let critic = &s.dcmp.critic;
            let mut g = Graph::new();
            let p = critic.params.bind(&mut g, true);
            let all = g.constant(Tensor::concat_batch(&[&rc, &rnc, &fc]));
            let sc = critic.forward(&mut g, &p, all);
            let s_rc = g.select(sc, &(0..b).collect::<Vec<_>>());
            let s_rnc = g.select(sc, &(b..2 * b).collect::<Vec<_>>());
            let s_fc = g.select(sc, &(2 * b..2 * b + bn).collect::<Vec<_>>());
            let loss = if ab.disable_contrastive {
                cmp_dis_plain_graph(&mut g, s_rc, s_fc)
            } else {
                cmp_dis_graph(&mut g, s_rc, s_rnc, s_fc)
            };
            cmp_dis = guard(it, "pair critic", g.value(loss).item())?;
            let mut objective = loss;
            if cfg.gp_coefficient > 0.0 && it.is_multiple_of(cfg.gp_every) {
                let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
                let rc_rep = rc.select(&rep);
                let (anchor, other) = if ab.disable_contrastive {
                    (rc_rep, fc.clone())
                } else {
                    (Tensor::concat_batch(&[&rc, &rc_rep]), Tensor::concat_batch(&[&rnc, &fc]))
                };
                let x_hat = interpolate_rows(&anchor, &other, &mut s.rng);
                let coef = cfg.gp_coefficient * cfg.gp_every as f64;
                let pen = gradient_penalty(&mut g, &p, &critic.params, |g, p, v| critic.forward(g, p, v), &x_hat, coef);
                gp = guard(it, "gradient penalty", g.value(pen).item())?;
                objective = g.add(objective, pen);
            }
            let grads = g.backward(objective);
            let grads = p.grads(&g, &grads);
            norms.insert("dcmp".to_string(), grad_norm(&grads));
            s.opt_dcmp.update(&mut s.dcmp.critic.params, &grads);
            order.push(StepKind::CompatibilityCritic);
            s.counters.critic += 1;
        }

        // (3) Encoder.
        let s = &mut self.state;
        let mut g = Graph::new();
        let e = s.bundle.e.bind(&mut g, true);
        let critics = Critics { dse: &s.dse, dcmp: &s.dcmp, dpix: &s.dpix };
        let terms = generator_objective(&mut g, &s.bundle, &e, &critics, &batch, &cfg, default_extractor());
        let adv = guard(it, "adversarial", g.value(terms.adv).item())?;
        let div = terms.div.map_or(Ok(0.0), |v| guard(it, "diversity", g.value(v).item()))?;
        let cmp = terms.cmp.map_or(Ok(0.0), |v| guard(it, "compatibility", g.value(v).item()))?;
        let total = guard(it, "total", g.value(terms.total).item())?;
        let grads = g.backward(terms.total);
        let grads = e.grads(&g, &grads);
        norms.insert("e".to_string(), grad_norm(&grads));
        s.opt_e.update(&mut s.bundle.e, &grads);
        order.push(StepKind::Encoder);
        s.counters.encoder += 1;
        s.counters.last_order = order;
        s.iteration += 1;

        let (lambda1, lambda2) = cfg.effective_weights();
        Ok(StepRecord {
            iter: it,
            dis,
            cmp_dis,
            adv,
            div,
            cmp,
            total,
            gp,
            lambda1,
            lambda2,
            grad_norms: norms,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut arrays = Vec::new();
        let mut meta = serde_json::Map::new();
        push_params(&mut arrays, "f", &s.bundle.f);
        push_params(&mut arrays, "g", &s.bundle.g);
        push_params(&mut arrays, "e", &s.bundle.e);
        push_params(&mut arrays, "dse", &s.dse.params);
        push_params(&mut arrays, "dcmp", &s.dcmp.critic.params);
        push_params(&mut arrays, "dpix", &s.dpix.critic.params);
        push_adam(&mut arrays, &mut meta, "e", &s.opt_e);
        push_adam(&mut arrays, &mut meta, "dse", &s.opt_dse);
        push_adam(&mut arrays, &mut meta, "dcmp", &s.opt_dcmp);
        push_adam(&mut arrays, &mut meta, "dpix", &s.opt_dpix);
        arrays.push(("pool".into(), s.pool.contents().concat()));
        meta.insert("pool.len".into(), s.pool.len().into());
        meta.insert("pool.rng".into(), hex::encode(s.pool.rng_state().to_bytes()).into());
        meta.insert("architecture".into(), serde_json::to_value(&s.bundle.arch).expect("serialisable"));
        meta.insert("target".into(), serde_json::to_value(s.bundle.target).expect("serialisable"));
        meta.insert("config".into(), serde_json::to_value(&self.config).expect("serialisable"));
        meta.insert("counters".into(), serde_json::to_value(&s.counters).expect("serialisable"));
        meta.insert("initial_frozen_digest".into(), self.initial_frozen_digest.clone().into());
        meta.insert("rng".into(), rng_to_meta(&s.rng));
        Checkpoint {
            stage: Stage::Bcgan,
            iteration: s.iteration,
            config_digest: self.config_digest.clone(),
            frozen_digest: s.bundle.frozen_digest(),
            meta: meta.into(),
            arrays,
        }
    }

    /// Resumes a session under `config`, which must hash to the checkpoint's digest
    /// (the iteration budget may differ).
    pub fn resume(ck: &Checkpoint, data: TrainingData, config: TrainConfig) -> Result<Self> {
        if ck.stage != Stage::Bcgan {
            return Err(Error::CorruptCheckpoint("not a BC-GAN training checkpoint".into()));
        }
        ck.require_digest(&config.digest())?;
        let bundle = super::bundle_from_checkpoint(ck)?;
        let mut t = Self::new(bundle, data, config)?;
        let s = &mut t.state;
        load_params(ck, "e", &mut s.bundle.e)?;
        load_params(ck, "dse", &mut s.dse.params)?;
        load_params(ck, "dcmp", &mut s.dcmp.critic.params)?;
        load_params(ck, "dpix", &mut s.dpix.critic.params)?;
        s.opt_e = load_adam(ck, "e", &s.bundle.e)?;
        s.opt_dse = load_adam(ck, "dse", &s.dse.params)?;
        s.opt_dcmp = load_adam(ck, "dcmp", &s.dcmp.critic.params)?;
        s.opt_dpix = load_adam(ck, "dpix", &s.dpix.critic.params)?;
        let len: usize = ck.meta_field("pool.len")?;
        let flat = ck.array("pool")?;
        let l = s.bundle.arch.latent_dim;
        if flat.len() != len * l {
            return Err(Error::CorruptCheckpoint("pool size does not match its recorded length".into()));
        }
        let rng_hex: String = ck.meta_field("pool.rng")?;
        let pool_rng = hex::decode(rng_hex)
            .ok()
            .and_then(|b| RngState::from_bytes(&b))
            .ok_or_else(|| Error::CorruptCheckpoint("pool rng state".into()))?;
        s.pool = EmbeddingPool::from_parts(t.config.pool_capacity, flat.chunks(l.max(1)).map(<[f64]>::to_vec).collect(), pool_rng);
        s.counters = ck.meta_field("counters")?;
        s.rng = rng_from_meta(ck, "rng")?;
        s.iteration = ck.iteration;
        t.initial_frozen_digest = ck.meta_field("initial_frozen_digest")?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, split_pairs, DatasetSpec};
    use crate::image::Domain;
    use crate::networks::Architecture;

    fn arch() -> Architecture {
        Architecture {
            latent_dim: 8,
            resolution: 16,
            mapping_depth: 2,
            synthesis_width: 8,
            encoder_width: 4,
            critic_width: 4,
            style_disc_width: 8,
        }
    }

    fn data() -> TrainingData {
        let ds = generate_synthetic_dataset(&DatasetSpec { n_upper: 20, n_lower: 20, resolution: 16, multiplicity: BTreeMap::from([(1, 12), (2, 8)]), ..DatasetSpec::default() }).unwrap();
        let split = split_pairs(&ds.pairs, Direction::UpperToLower, 0.8, 3).unwrap();
        TrainingData::from_split(&ds, &split).unwrap()
    }

    fn config(ab: Ablations) -> TrainConfig {
        TrainConfig { iterations: 4, batch_size: 3, pool_capacity: 8, ablations: ab, seed: 11, ..TrainConfig::default() }
    }

    fn trainer(ab: Ablations) -> BcganTrainer {
        BcganTrainer::new(GeneratorBundle::new(arch(), Domain::Lower, 5).unwrap(), data(), config(ab)).unwrap()
    }

    fn strip_time(mut r: StepRecord) -> StepRecord {
        r.ms = 0.0;
        r
    }

    #[test]
    fn frozen_networks_never_move() {
        let mut t = trainer(Ablations::default());
        let before = t.trainable_digests();
        for _ in 0..3 {
            t.step().unwrap();
        }
        assert_eq!(t.bundle().frozen_digest(), t.initial_frozen_digest());
        let after = t.trainable_digests();
        for key in ["e", "dse", "dcmp"] {
            assert_ne!(before[key], after[key], "{key} did not train");
        }
        assert_eq!(before["dpix"], after["dpix"]);
    }

    #[test]
    fn update_order() {
        use StepKind::*;
        let cases = [
            (Ablations::default(), vec![StyleDiscriminator, CompatibilityCritic, Encoder]),
            (Ablations { disable_dcmp: true, ..Ablations::default() }, vec![StyleDiscriminator, Encoder]),
            (Ablations { use_pixel_discriminator: true, ..Ablations::default() }, vec![PixelDiscriminator, CompatibilityCritic, Encoder]),
        ];
        for (ab, order) in cases {
            let mut t = trainer(ab);
            t.step().unwrap();
            t.step().unwrap();
            let c = t.counters();
            assert_eq!(c.last_order, order);
            assert_eq!((c.discriminator, c.encoder), (2, 2));
            assert_eq!(c.critic, if ab.disable_dcmp { 0 } else { 2 });
        }
    }

    #[test]
    fn total_matches_logged_terms() {
        for ab in [
            Ablations::default(),
            Ablations { disable_div: true, ..Ablations::default() },
            Ablations { disable_dcmp: true, ..Ablations::default() },
            Ablations { disable_contrastive: true, ..Ablations::default() },
        ] {
            let mut t = trainer(ab);
            let r = t.step().unwrap();
            let recomputed = r.adv + r.lambda1 * r.div + r.lambda2 * r.cmp;
            assert!((r.total - recomputed).abs() <= 1e-9 * (1.0 + r.total.abs()), "{ab:?}");
            if ab.disable_div {
                assert_eq!((r.div, r.lambda1), (0.0, 0.0));
            }
            if ab.disable_dcmp {
                assert_eq!((r.cmp, r.cmp_dis, r.lambda2, r.gp), (0.0, 0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn resume_is_exact() {
        let mut straight = trainer(Ablations::default());
        let expected: Vec<_> = (0..4).map(|_| strip_time(straight.step().unwrap())).collect();

        let mut first = trainer(Ablations::default());
        let mut got: Vec<_> = (0..2).map(|_| strip_time(first.step().unwrap())).collect();
        let bytes = first.to_checkpoint().encode().unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let mut second = BcganTrainer::resume(&ck, data(), config(Ablations::default())).unwrap();
        assert_eq!(second.iteration(), 2);
        got.extend((0..2).map(|_| strip_time(second.step().unwrap())));
        assert_eq!(got, expected);
        assert_eq!(second.trainable_digests(), straight.trainable_digests());
        assert_eq!(second.to_checkpoint().encode().unwrap(), straight.to_checkpoint().encode().unwrap());
    }

    #[test]
    fn resume_refuses_other_config() {
        let t = trainer(Ablations::default());
        let ck = t.to_checkpoint();
        let other = TrainConfig { seed: 12, ..config(Ablations::default()) };
        assert!(matches!(BcganTrainer::resume(&ck, data(), other), Err(Error::DigestMismatch { .. })));
        let longer = TrainConfig { iterations: 400, ..config(Ablations::default()) };
        assert!(BcganTrainer::resume(&ck, data(), longer).is_ok());
    }

    #[test]
    fn divergence_rolls_back() {
        let cfg = TrainConfig { optimizer: OptimizerConfig { learning_rate: 1e9, ..OptimizerConfig::default() }, ..config(Ablations::default()) };
        let mut t = BcganTrainer::new(GeneratorBundle::new(arch(), Domain::Lower, 5).unwrap(), data(), cfg).unwrap();
        for _ in 0..6 {
            let (iter, digests) = (t.iteration(), t.trainable_digests());
            match t.step() {
                Ok(_) => continue,
                Err(Error::Divergence { iteration, .. }) => {
                    assert_eq!(iteration, iter);
                    assert_eq!(t.iteration(), iter);
                    assert_eq!(t.trainable_digests(), digests);
                    return;
                }
                Err(e) => panic!("unexpected {e}"),
            }
        }
        panic!("huge learning rate never diverged");
    }

    #[test]
    fn rejects_bad_setups() {
        let bundle = || GeneratorBundle::new(arch(), Domain::Lower, 5).unwrap();
        let no_div_pairs = TrainConfig { latent_codes: 1, ..config(Ablations::default()) };
        assert!(BcganTrainer::new(bundle(), data(), no_div_pairs).is_err());
        let ok = TrainConfig { latent_codes: 1, ..config(Ablations { disable_div: true, ..Ablations::default() }) };
        assert!(BcganTrainer::new(bundle(), data(), ok).is_ok());
        let wrong_domain = GeneratorBundle::new(arch(), Domain::Upper, 5).unwrap();
        assert!(BcganTrainer::new(wrong_domain, data(), config(Ablations::default())).is_err());
        let big = TrainConfig { batch_size: 1000, ..config(Ablations::default()) };
        assert!(BcganTrainer::new(bundle(), data(), big).is_err());
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let mut t = trainer(Ablations::default());
        t.step().unwrap();
        let batch = t.sample_batch().unwrap();
        let cfg = t.config.clone();
        let bundle = t.bundle().clone();
        let critics = t.critics();
        let eval = |b: &GeneratorBundle| {
            let mut g = Graph::new();
            let e = b.e.bind(&mut g, false);
            let terms = generator_objective(&mut g, b, &e, &critics, &batch, &cfg, default_extractor());
            g.value(terms.total).item()
        };
        let mut g = Graph::new();
        let e = bundle.e.bind(&mut g, true);
        let terms = generator_objective(&mut g, &bundle, &e, &critics, &batch, &cfg, default_extractor());
        let grads = g.backward(terms.total);
        let analytic: Vec<f64> = e.grads(&g, &grads).iter().flat_map(|t| t.data().iter().copied()).collect();
        let flat = bundle.e.flatten();
        let h = 1e-6;
        let mut checked = 0;
        for idx in (0..flat.len()).step_by(flat.len() / 12 + 1) {
            let mut plus = bundle.clone();
            let mut minus = bundle.clone();
            let mut v = flat.clone();
            v[idx] += h;
            plus.e.load_flat(&v).unwrap();
            v[idx] -= 2.0 * h;
            minus.e.load_flat(&v).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let tol = 1e-4 * (1.0 + numeric.abs().max(analytic[idx].abs()));
            assert!((numeric - analytic[idx]).abs() < tol, "param {idx}: {numeric} vs {}", analytic[idx]);
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
