//! Mapping network, style-modulated synthesis network, conditional encoder, and
//! the composed generation pipeline `y = g(e(x ⊕ g(f(z))))`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{batch_tensor, images_from_tensor, Domain, Image};
use crate::nn::{lrelu_gain, Bound, Conv, Linear, ParamBuilder, Params, LEAK};
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

/// Layer sizes shared by every network of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    pub resolution: usize,
    pub mapping_depth: usize,
    /// Channels at 4×4 in the synthesis network; halves per level down to 8.
    pub synthesis_width: usize,
    /// Channels at full resolution in convolutional encoders and critics; doubles
    /// per level up to four times this value.
    pub encoder_width: usize,
    pub critic_width: usize,
    pub style_disc_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            resolution: 32,
            mapping_depth: 3,
            synthesis_width: 64,
            encoder_width: 8,
            critic_width: 8,
            style_disc_width: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.mapping_depth == 0 {
            return Err(Error::Config("latent_dim and mapping_depth must be positive".into()));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution must be a power of two >= 8, got {}", self.resolution)));
        }
        if self.synthesis_width == 0 || self.encoder_width == 0 || self.critic_width == 0 || self.style_disc_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Resolutions from 4 up to the output size.
    pub fn levels(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize + 1
    }

    fn synthesis_widths(&self) -> Vec<usize> {
        let floor = self.synthesis_width.min(8);
        (0..self.levels()).map(|i| (self.synthesis_width >> i).max(floor)).collect()
    }
}

/// Widths of a downsampling pyramid from full resolution to 4×4.
fn pyramid_widths(base: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| (base << i).min(4 * base)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn sample(dim: usize, rng: &mut SeededRng) -> Self {
        Self { values: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Mapped,
    Encoded,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub values: Vec<f64>,
    pub origin: Origin,
}

impl StyleEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rescales each row of `[N, L]` latents to unit mean square.
pub fn normalize_latents(z: &Tensor) -> Tensor {
    let l = z.per_sample();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(l) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / l as f64;
        let inv = 1.0 / (ms + 1e-8).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    layers: Vec<Linear>,
}

impl Mapping {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, arch: &Architecture) -> Self {
        let l = arch.latent_dim;
        let layers = (0..arch.mapping_depth).map(|i| b.linear(&format!("map{i}"), l, l, lrelu_gain())).collect();
        Self { layers }
    }

    /// `[N, L]` normalised latents → `[N, L]` style embeddings.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAK);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SynthesisLevel {
    conv: Conv,
    style_scale: Linear,
    style_shift: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    constant: usize,
    levels: Vec<SynthesisLevel>,
    to_rgb: Conv,
}

impl Synthesis {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, arch: &Architecture) -> Self {
        let widths = arch.synthesis_widths();
        let constant = b.normal("syn.const", vec![1, widths[0], 4, 4], 1.0);
        let mut prev = widths[0];
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let level = SynthesisLevel {
                    conv: b.conv(&format!("syn{i}.conv"), prev, c, 3, lrelu_gain()),
                    style_scale: b.linear(&format!("syn{i}.scale"), arch.latent_dim, c, 1.0),
                    style_shift: b.linear(&format!("syn{i}.shift"), arch.latent_dim, c, 1.0),
                };
                prev = c;
                level
            })
            .collect();
        let to_rgb = b.conv("syn.rgb", prev, 3, 1, 1.0);
        Self { constant, levels, to_rgb }
    }

    /// `[N, L]` embeddings → `[N, 3, S, S]` images in `(−1, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, w: Var) -> Var {
        let n = g.value(w).batch();
        let mut h = g.select(p.var(self.constant), &vec![0; n]);
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                h = g.upsample2x(h);
            }
            h = level.conv.forward(g, p, h);
            let s = level.style_scale.forward(g, p, w);
            let scale = g.add_scalar(s, 1.0);
            let shift = level.style_shift.forward(g, p, w);
            h = g.channel_affine(h, scale, shift);
            h = g.leaky_relu(h, LEAK);
        }
        let rgb = self.to_rgb.forward(g, p, h);
        g.tanh(rgb)
    }
}

/// Convolutional pyramid over a stacked image pair, pooled to one vector per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pyramid {
    convs: Vec<Conv>,
}

impl Pyramid {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, in_channels: usize, base: usize, levels: usize) -> Self {
        let mut prev = in_channels;
        let convs = pyramid_widths(base, levels)
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let conv = b.conv(&format!("{prefix}{i}"), prev, c, 3, lrelu_gain());
                prev = c;
                conv
            })
            .collect();
        Self { convs }
    }

    /// Length of the pooled feature vector for a `levels`-deep pyramid.
    pub fn feature_len(base: usize, levels: usize) -> usize {
        let w = pyramid_widths(base, levels);
        w.iter().sum::<usize>() + w.last().copied().unwrap_or(0) * 16
    }

    /// Global averages of every level plus the flattened 4×4 map.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let mut parts = Vec::with_capacity(self.convs.len() + 1);
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2x(h);
            }
            let c = conv.forward(g, p, h);
            h = g.leaky_relu(c, LEAK);
            parts.push(g.global_avg_pool(h));
        }
        parts.push(g.flatten(h));
        g.concat_features(&parts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pyramid: Pyramid,
    hidden: Linear,
    out: Linear,
}

impl Encoder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, arch: &Architecture) -> Self {
        let levels = arch.levels();
        let pyramid = Pyramid::build(b, "enc", 6, arch.encoder_width, levels);
        let feat = Pyramid::feature_len(arch.encoder_width, levels);
        let hidden = b.linear("enc.hidden", feat, arch.latent_dim, lrelu_gain());
        let out = b.linear("enc.out", arch.latent_dim, arch.latent_dim, 1.0);
        Self { pyramid, hidden, out }
    }

    /// `[N, 6, S, S]` stacked (given, reference) pairs → `[N, L]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pair: Var) -> Var {
        let f = self.pyramid.forward(g, p, pair);
        let h = self.hidden.forward(g, p, f);
        let h = g.leaky_relu(h, LEAK);
        self.out.forward(g, p, h)
    }
}

/// Intermediates of one conditional generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub y: Image,
    pub w_orig: StyleEmbedding,
    pub w: StyleEmbedding,
    pub y_orig: Image,
    pub z: LatentCode,
}

/// `f` and `g` (frozen after pre-training) plus the trainable encoder `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle {
    pub arch: Architecture,
    /// Domain that `g` synthesises.
    pub target: Domain,
    pub mapping: Mapping,
    pub synthesis: Synthesis,
    pub encoder: Encoder,
    pub f: Params,
    pub g: Params,
    pub e: Params,
}

impl GeneratorBundle {
    pub fn new(arch: Architecture, target: Domain, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let mut fb = ParamBuilder::new(&mut rng);
        let mapping = Mapping::build(&mut fb, &arch);
        let f = fb.finish();
        let mut gb = ParamBuilder::new(&mut rng);
        let synthesis = Synthesis::build(&mut gb, &arch);
        let g = gb.finish();
        let mut eb = ParamBuilder::new(&mut rng);
        let encoder = Encoder::build(&mut eb, &arch);
        let e = eb.finish();
        Ok(Self { arch, target, mapping, synthesis, encoder, f, g, e })
    }

    /// Fresh encoder weights from `seed`, leaving `f` and `g` untouched.
    pub fn reinit_encoder(&mut self, seed: u64) {
        let mut rng = seeded(seed);
        let mut eb = ParamBuilder::new(&mut rng);
        self.encoder = Encoder::build(&mut eb, &self.arch);
        self.e = eb.finish();
    }

    /// Content hash of the mapping and synthesis parameters.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        self.f.digest_into(&mut h);
        self.g.digest_into(&mut h);
        hex::encode(h.finalize())
    }

    pub fn source(&self) -> Domain {
        self.target.other()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.arch.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.latent_dim, actual: len });
        }
        Ok(())
    }

    fn check_image(&self, img: &Image, domain: Domain) -> Result<()> {
        if img.size() != self.arch.resolution {
            return Err(Error::ResolutionMismatch(self.arch.resolution, img.size()));
        }
        if img.domain != domain {
            return Err(Error::DomainMismatch { expected: domain, actual: img.domain });
        }
        Ok(())
    }

    /// Graph helper: mapped embeddings for raw latents `[N, L]`.
    pub fn map_graph(&self, g: &mut Graph, f: &Bound, z: &Tensor) -> Var {
        let zn = g.constant(normalize_latents(z));
        self.mapping.forward(g, f, zn)
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleEmbedding> {
        self.check_len(z.len())?;
        let mut gr = Graph::new();
        let f = self.f.bind(&mut gr, false);
        let w = self.map_graph(&mut gr, &f, &Tensor::new(vec![1, z.len()], z.values.clone()));
        Ok(StyleEmbedding { values: gr.value(w).data().to_vec(), origin: Origin::Mapped })
    }

    /// Synthesises a batch of `[N, L]` embeddings without recording gradients.
    pub fn synthesize_tensor(&self, w: &Tensor) -> Tensor {
        let mut gr = Graph::new();
        let p = self.g.bind(&mut gr, false);
        let wv = gr.constant(w.clone());
        let y = self.synthesis.forward(&mut gr, &p, wv);
        gr.value(y).clone()
    }

    pub fn synthesize(&self, w: &StyleEmbedding) -> Result<Image> {
        self.check_len(w.len())?;
        let t = self.synthesize_tensor(&Tensor::new(vec![1, w.len()], w.values.clone()));
        Ok(images_from_tensor(&t, self.target, "synth").remove(0))
    }

    pub fn encode(&self, x: &Image, y_orig: &Image) -> Result<StyleEmbedding> {
        self.check_image(x, self.source())?;
        self.check_image(y_orig, self.target)?;
        let pair = stack_pair(&batch_tensor(&[x])?, &batch_tensor(&[y_orig])?);
        let mut gr = Graph::new();
        let p = self.e.bind(&mut gr, false);
        let input = gr.constant(pair);
        let w = self.encoder.forward(&mut gr, &p, input);
        Ok(StyleEmbedding { values: gr.value(w).data().to_vec(), origin: Origin::Encoded })
    }

    pub fn generate(&self, x: &Image, z: &LatentCode) -> Result<Generation> {
        let w_orig = self.map_latent(z)?;
        let y_orig = self.synthesize(&w_orig)?;
        let w = self.encode(x, &y_orig)?;
        let y = self.synthesize(&w)?;
        Ok(Generation { y, w_orig, w, y_orig, z: z.clone() })
    }

    /// `n` generations from i.i.d. standard-normal latents drawn from `seed`.
    pub fn generate_batch(&self, x: &Image, n: usize, seed: u64) -> Result<Vec<Generation>> {
        if n == 0 {
            return Err(Error::InvalidArgument("generate_batch needs n >= 1".into()));
        }
        let mut rng = seeded(seed);
        let zs: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(self.arch.latent_dim, &mut rng)).collect();
        zs.iter().map(|z| self.generate(x, z)).collect()
    }

    /// Unconditional samples `g(f(z))` for `n` latents drawn from `rng`.
    pub fn sample_unconditional(&self, n: usize, rng: &mut SeededRng) -> Vec<Image> {
        let l = self.arch.latent_dim;
        let z = Tensor::new(vec![n, l], (0..n * l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let mut gr = Graph::new();
        let f = self.f.bind(&mut gr, false);
        let p = self.g.bind(&mut gr, false);
        let w = self.map_graph(&mut gr, &f, &z);
        let y = self.synthesis.forward(&mut gr, &p, w);
        images_from_tensor(gr.value(y), self.target, "sample")
    }
}

/// Channel-wise concatenation of two `[N, 3, S, S]` batches.
pub fn stack_pair(x: &Tensor, y: &Tensor) -> Tensor {
    assert_eq!(x.shape(), y.shape(), "pair halves must match");
    let k = x.per_sample();
    let mut data = Vec::with_capacity(2 * x.len());
    for i in 0..x.batch() {
        data.extend_from_slice(&x.data()[i * k..(i + 1) * k]);
        data.extend_from_slice(&y.data()[i * k..(i + 1) * k]);
    }
    let s = x.shape();
    Tensor::new(vec![s[0], 2 * s[1], s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(resolution: usize, latent_dim: usize) -> GeneratorBundle {
        let arch = Architecture {
            latent_dim,
            resolution,
            mapping_depth: 2,
            synthesis_width: 8,
            encoder_width: 4,
            critic_width: 4,
            style_disc_width: 8,
        };
        GeneratorBundle::new(arch, Domain::Lower, 3).unwrap()
    }

    fn upper(size: usize, rgb: [f64; 3]) -> Image {
        Image::filled(size, Domain::Upper, "x", rgb)
    }

    #[test]
    fn shapes_and_determinism() {
        let b = tiny(16, 8);
        let mut rng = seeded(0);
        let z = LatentCode::sample(8, &mut rng);
        let w = b.map_latent(&z).unwrap();
        assert_eq!(w.len(), 8);
        assert_eq!(w, b.map_latent(&z).unwrap());
        let y = b.synthesize(&w).unwrap();
        assert_eq!(y.size(), 16);
        assert_eq!(y.domain, Domain::Lower);
        assert_eq!(y, b.synthesize(&w).unwrap());
        assert!(b.map_latent(&LatentCode { values: vec![0.0; 7] }).is_err());
    }

    #[test]
    fn zero_mapping_gives_zero_embedding() {
        let mut b = tiny(16, 8);
        b.f.zero_all();
        let z = LatentCode { values: vec![0.3; 8] };
        assert!(b.map_latent(&z).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_embeddings_differ() {
        let b = tiny(16, 8);
        let w1 = StyleEmbedding { values: vec![0.1; 8], origin: Origin::Mapped };
        let mut w2 = w1.clone();
        w2.values[3] += 0.5;
        assert_eq!(b.synthesize(&w1).unwrap(), b.synthesize(&w1.clone()).unwrap());
        assert_ne!(b.synthesize(&w1).unwrap(), b.synthesize(&w2).unwrap());
    }

    #[test]
    fn encoder_is_order_sensitive_and_checks_domains() {
        let b = tiny(16, 8);
        let x = upper(16, [0.5, -0.2, 0.1]);
        let mut rng = seeded(1);
        let g = b.generate(&x, &LatentCode::sample(8, &mut rng)).unwrap();
        let w = b.encode(&x, &g.y_orig).unwrap();
        assert_eq!(w.origin, Origin::Encoded);
        assert_eq!(w, b.encode(&x, &g.y_orig).unwrap());
        // Swapped stacking, bypassing the domain check.
        let swapped = stack_pair(&batch_tensor(&[&g.y_orig]).unwrap(), &batch_tensor(&[&x]).unwrap());
        let mut gr = Graph::new();
        let p = b.e.bind(&mut gr, false);
        let input = gr.constant(swapped);
        let ws = b.encoder.forward(&mut gr, &p, input);
        assert_ne!(gr.value(ws).data(), &w.values[..]);
        assert!(matches!(b.encode(&g.y_orig, &x), Err(Error::DomainMismatch { .. })));
        assert!(matches!(b.encode(&upper(8, [0.0; 3]), &g.y_orig), Err(Error::ResolutionMismatch(..))));
    }

    #[test]
    fn generate_equals_composition() {
        let b = tiny(16, 8);
        let x = upper(16, [0.2, 0.4, -0.6]);
        let z = LatentCode::sample(8, &mut seeded(5));
        let gen = b.generate(&x, &z).unwrap();
        let w_orig = b.map_latent(&z).unwrap();
        let y_orig = b.synthesize(&w_orig).unwrap();
        let w = b.encode(&x, &y_orig).unwrap();
        let y = b.synthesize(&w).unwrap();
        assert_eq!(gen.y.pixels(), y.pixels());
        assert_eq!(gen.w, w);
        assert_eq!(gen.y_orig, y_orig);
    }

    #[test]
    fn generate_batch_contract() {
        let b = tiny(16, 8);
        let x = upper(16, [0.0, 0.0, 0.0]);
        let ten = b.generate_batch(&x, 10, 4).unwrap();
        assert_eq!(ten.len(), 10);
        assert_eq!(ten, b.generate_batch(&x, 10, 4).unwrap());
        let one = b.generate_batch(&x, 1, 4).unwrap();
        assert_eq!(one[0], b.generate(&x, &ten[0].z).unwrap());
        assert!(b.generate_batch(&x, 0, 4).is_err());
    }

    #[test]
    fn batched_graph_matches_single_calls() {
        let b = tiny(16, 8);
        let mut rng = seeded(2);
        let z: Vec<LatentCode> = (0..3).map(|_| LatentCode::sample(8, &mut rng)).collect();
        let zt = Tensor::from_rows(&z.iter().map(|c| c.values.clone()).collect::<Vec<_>>());
        let mut gr = Graph::new();
        let f = b.f.bind(&mut gr, false);
        let w = b.map_graph(&mut gr, &f, &zt);
        let batch = b.synthesize_tensor(gr.value(w));
        for (i, zi) in z.iter().enumerate() {
            let single = b.synthesize(&b.map_latent(zi).unwrap()).unwrap();
            for (a, c) in batch.row(i).iter().zip(single.pixels()) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_digest_tracks_f_and_g_only() {
        let mut b = tiny(16, 8);
        let d = b.frozen_digest();
        b.e.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(d, b.frozen_digest());
        b.g.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(d, b.frozen_digest());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn shape_contract_sweep(res_pow in 4u32..7, l in prop::sample::select(vec![4usize, 8, 16])) {
            let res = 1usize << res_pow;
            let b = tiny(res, l);
            let x = upper(res, [0.1, 0.2, 0.3]);
            let gen = b.generate(&x, &LatentCode::sample(l, &mut seeded(9))).unwrap();
            prop_assert_eq!(gen.y.size(), res);
            prop_assert_eq!(gen.w.len(), l);
            prop_assert!(gen.y.pixels().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
    }
}
