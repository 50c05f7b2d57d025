//! Style-embedding discriminator with its history pool, the pair critic used for
//! contrastive compatibility training, and the pixel discriminator used during
//! pre-training.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::OutfitPair;
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::image::{batch_tensor, Domain, Image};
use crate::networks::{stack_pair, Architecture, Pyramid, StyleEmbedding};
use crate::nn::{lrelu_gain, Bound, Linear, ParamBuilder, Params, LEAK};
use crate::rng::{seeded, RngState, SeededRng};
use crate::tensor::Tensor;

/// Four-layer MLP over style embeddings; emits a logit.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDiscriminator {
    layers: Vec<Linear>,
    pub params: Params,
    latent_dim: usize,
}

impl StyleDiscriminator {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let h = arch.style_disc_width;
        let sizes = [arch.latent_dim, h, h, h, 1];
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, s)| b.linear(&format!("dse{i}"), s[0], s[1], if i == 3 { 1.0 } else { lrelu_gain() }))
            .collect();
        Self { layers, params: b.finish(), latent_dim: arch.latent_dim }
    }

    /// `[N, L]` → `[N, 1]` logits.
    pub fn forward(&self, g: &mut Graph, p: &Bound, w: Var) -> Var {
        let mut h = w;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAK);
            }
        }
        h
    }

    /// Probability that `w` came from the mapping network.
    pub fn score_style_embedding(&self, w: &StyleEmbedding) -> Result<f64> {
        if w.len() != self.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.latent_dim, actual: w.len() });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, w.len()], w.values.clone()));
        let logit = self.forward(&mut g, &p, x);
        Ok(graph::sigmoid(g.value(logit).item()))
    }
}

/// Bounded history of past embeddings mixed into discriminator batches.
#[derive(Clone, Debug)]
pub struct EmbeddingPool {
    capacity: usize,
    buffer: Vec<Vec<f64>>,
    rng: SeededRng,
}

impl PartialEq for EmbeddingPool {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity && self.buffer == other.buffer && RngState::capture(&self.rng) == RngState::capture(&other.rng)
    }
}

impl EmbeddingPool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, buffer: Vec::with_capacity(capacity), rng: seeded(seed) }
    }

    pub fn from_parts(capacity: usize, buffer: Vec<Vec<f64>>, rng: RngState) -> Self {
        Self { capacity, buffer, rng: rng.restore() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn contents(&self) -> &[Vec<f64>] {
        &self.buffer
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Stores `w` while filling; once full, returns `w` or (with probability ½)
    /// swaps it for a uniformly chosen stored entry.
    pub fn exchange(&mut self, w: Vec<f64>) -> Vec<f64> {
        if self.capacity == 0 {
            return w;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(w.clone());
            return w;
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.buffer.len());
            std::mem::replace(&mut self.buffer[i], w)
        } else {
            w
        }
    }

    pub fn pool_exchange(&mut self, w: StyleEmbedding) -> StyleEmbedding {
        StyleEmbedding { values: self.exchange(w.values), origin: w.origin }
    }
}

/// Conv pyramid with a scalar linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCritic {
    pyramid: Pyramid,
    head: Linear,
    in_channels: usize,
    resolution: usize,
    pub params: Params,
}

impl ConvCritic {
    pub fn new(prefix: &str, in_channels: usize, arch: &Architecture, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let levels = arch.levels();
        let pyramid = Pyramid::build(&mut b, prefix, in_channels, arch.critic_width, levels);
        let head = b.linear(&format!("{prefix}.head"), Pyramid::feature_len(arch.critic_width, levels), 1, 1.0);
        Self { pyramid, head, in_channels, resolution: arch.resolution, params: b.finish() }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// `[N, C, S, S]` → `[N, 1]` unbounded scores.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let f = self.pyramid.forward(g, p, x);
        self.head.forward(g, p, f)
    }

    pub fn score_tensor(&self, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(x.clone());
        let s = self.forward(&mut g, &p, v);
        g.value(s).data().to_vec()
    }
}

/// Unbounded real score from the pair critic.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CriticScore(pub f64);

/// Critic over the 6-channel stack `x ⊕ y`. Lower scores mean "more like a real
/// compatible pair" under the descent-form losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityCritic {
    pub critic: ConvCritic,
    source: Domain,
}

impl CompatibilityCritic {
    pub fn new(arch: &Architecture, source: Domain, seed: u64) -> Self {
        Self { critic: ConvCritic::new("dcmp", 6, arch, seed), source }
    }

    pub fn score_pair(&self, x: &Image, y: &Image) -> Result<CriticScore> {
        if x.size() != self.critic.resolution || y.size() != self.critic.resolution {
            return Err(Error::ResolutionMismatch(self.critic.resolution, if x.size() != self.critic.resolution { x.size() } else { y.size() }));
        }
        if x.domain != self.source {
            return Err(Error::DomainMismatch { expected: self.source, actual: x.domain });
        }
        if y.domain != self.source.other() {
            return Err(Error::DomainMismatch { expected: self.source.other(), actual: y.domain });
        }
        let pair = stack_pair(&batch_tensor(&[x])?, &batch_tensor(&[y])?);
        Ok(CriticScore(self.critic.score_tensor(&pair)[0]))
    }
}

/// Real/fake image discriminator over single target-domain images; emits logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelDiscriminator {
    pub critic: ConvCritic,
}

impl PixelDiscriminator {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        Self { critic: ConvCritic::new("dpix", 3, arch, seed) }
    }

    pub fn probability(&self, y: &Image) -> Result<f64> {
        Ok(graph::sigmoid(self.critic.score_tensor(&batch_tensor(&[y])?)[0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairRole {
    RealCompatible,
    RealIncompatible,
    FakeCompatible,
    FakeIncompatible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    DPhase,
    GPhase,
}

/// Which target-side item a pair uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Candidate {
    /// The ground-truth match of batch entry `i`.
    Matched(usize),
    /// A training-set target entity never matched with the given item.
    Negative(String),
    /// Generator output `k` conditioned on batch entry `source`.
    Synthesized { source: usize, k: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub given: usize,
    pub candidate: Candidate,
    pub role: PairRole,
}

/// Uniform negative sampling over target entities not matched with a given item.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    targets: Vec<String>,
    matched: HashMap<String, HashSet<String>>,
}

impl NegativeSampler {
    /// `pairs` is the training match manifest; `source` the given-item domain.
    pub fn new(pairs: &[&OutfitPair], source: Domain) -> Self {
        let mut matched: HashMap<String, HashSet<String>> = HashMap::new();
        let mut targets: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for p in pairs {
            let (s, t) = (p.item(source), p.item(source.other()));
            matched.entry(s.to_string()).or_default().insert(t.to_string());
            if seen.insert(t.to_string()) {
                targets.push(t.to_string());
            }
        }
        targets.sort();
        Self { targets, matched }
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn is_matched(&self, given: &str, target: &str) -> bool {
        self.matched.get(given).is_some_and(|m| m.contains(target))
    }

    pub fn sample(&self, given: &str, rng: &mut SeededRng) -> Result<String> {
        let blocked = self.matched.get(given);
        let allowed = self.targets.len() - blocked.map_or(0, |b| b.iter().filter(|t| self.targets.binary_search(t).is_ok()).count());
        if allowed == 0 {
            return Err(Error::Data(format!("no unmatched target item available for {given}")));
        }
        let mut k = rng.random_range(0..allowed);
        for t in &self.targets {
            if blocked.is_some_and(|b| b.contains(t)) {
                continue;
            }
            if k == 0 {
                return Ok(t.clone());
            }
            k -= 1;
        }
        unreachable!("index within allowed range")
    }
}

/// Role-tagged pairs for one batch. `given_ids[i]` is the entity id of batch entry
/// `i`; `n` generator outputs exist per entry.
pub fn assemble_pairs(given_ids: &[&str], n: usize, phase: Phase, sampler: &NegativeSampler, rng: &mut SeededRng) -> Result<Vec<PairEntry>> {
    let b = given_ids.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one synthesized output per input".into()));
    }
    let mut out = Vec::with_capacity(b * (2 + 2 * n));
    match phase {
        Phase::DPhase => {
            for (i, id) in given_ids.iter().enumerate() {
                out.push(PairEntry { given: i, candidate: Candidate::Matched(i), role: PairRole::RealCompatible });
                out.push(PairEntry { given: i, candidate: Candidate::Negative(sampler.sample(id, rng)?), role: PairRole::RealIncompatible });
                for k in 0..n {
                    out.push(PairEntry { given: i, candidate: Candidate::Synthesized { source: i, k }, role: PairRole::FakeCompatible });
                }
            }
        }
        Phase::GPhase => {
            if b < 2 {
                return Err(Error::InvalidArgument("GPhase pair assembly needs batch >= 2 to form (f,!c) pairs".into()));
            }
            let shift = rng.random_range(1..b);
            for i in 0..b {
                out.push(PairEntry { given: i, candidate: Candidate::Matched(i), role: PairRole::RealCompatible });
                for k in 0..n {
                    out.push(PairEntry { given: i, candidate: Candidate::Synthesized { source: i, k }, role: PairRole::FakeCompatible });
                }
                for k in 0..n {
                    let other = (i + shift) % b;
                    out.push(PairEntry { given: i, candidate: Candidate::Synthesized { source: other, k }, role: PairRole::FakeIncompatible });
                }
            }
        }
    }
    Ok(out)
}

/// Finite-difference slope of `forward` at each row of `x_hat` along its own
/// (detached) input-gradient direction: `(D(x̂ + h·u) − D(x̂ − h·u)) / 2h` with
/// `u = ∇D/‖∇D‖`. The value approximates `‖∇D(x̂)‖` and its parameter gradient
/// matches the gradient of that norm; for piecewise-linear critics both are exact
/// when no activation changes sign within `h`.
///
/// Returns `[N, 1]` slopes bound to `bound` in `g`.
pub fn directional_slopes<F>(g: &mut Graph, bound: &Bound, params: &Params, forward: F, x_hat: &Tensor, h: f64) -> Var
where
    F: Fn(&mut Graph, &Bound, Var) -> Var,
{
    let mut scratch = Graph::new();
    let sp = params.bind(&mut scratch, false);
    let xv = scratch.leaf(x_hat.clone());
    let scores = forward(&mut scratch, &sp, xv);
    let total = scratch.sum(scores);
    let grads = scratch.backward(total);
    let grad = grads.get_or_zeros(xv, x_hat);

    let k = x_hat.per_sample();
    let n = x_hat.batch();
    let mut plus = x_hat.clone();
    let mut minus = x_hat.clone();
    for i in 0..n {
        let gi = &grad.data()[i * k..(i + 1) * k];
        let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            continue;
        }
        for j in 0..k {
            let step = h * gi[j] / norm;
            plus.data_mut()[i * k + j] += step;
            minus.data_mut()[i * k + j] -= step;
        }
    }
    let both = g.constant(Tensor::concat_batch(&[&plus, &minus]));
    let s = forward(g, bound, both);
    let idx_p: Vec<usize> = (0..n).collect();
    let idx_m: Vec<usize> = (n..2 * n).collect();
    let sp = g.select(s, &idx_p);
    let sm = g.select(s, &idx_m);
    let d = g.sub(sp, sm);
    g.scale(d, 0.5 / h)
}

/// `coefficient · mean((slope − 1)²)` over interpolates.
pub fn gradient_penalty<F>(g: &mut Graph, bound: &Bound, params: &Params, forward: F, x_hat: &Tensor, coefficient: f64) -> Var
where
    F: Fn(&mut Graph, &Bound, Var) -> Var,
{
    let slopes = directional_slopes(g, bound, params, forward, x_hat, 1e-3);
    let dev = g.add_scalar(slopes, -1.0);
    let sq = g.square(dev);
    let m = g.mean(sq);
    g.scale(m, coefficient)
}

/// Row-wise `t·a + (1 − t)·b` with one `t ~ U(0, 1)` per row.
pub fn interpolate_rows(a: &Tensor, b: &Tensor, rng: &mut SeededRng) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let k = a.per_sample();
    let mut out = a.clone();
    for i in 0..a.batch() {
        let t: f64 = rng.random();
        for j in i * k..(i + 1) * k {
            out.data_mut()[j] = t * a.data()[j] + (1.0 - t) * b.data()[j];
        }
    }
    out
}
