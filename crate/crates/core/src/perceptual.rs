//! Frozen multi-scale random-convolution features and the perceptual distance
//! built on them.
//!
//! `d(a, b) = Σ_s mean((φ_s(a) − φ_s(b))²)` where `φ_0` is the raw pixels and
//! `φ_1..φ_3` are leaky-ReLU activations of a seeded three-layer conv stack at
//! full, half, and quarter resolution. The pixel scale makes `d` vanish only on
//! identical inputs; the random scales add local-structure sensitivity.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{batch_tensor, Image};
use crate::nn::{lrelu_gain, Conv, ParamBuilder, Params, LEAK};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const DEFAULT_SEED: u64 = 0x5eed_1e55;

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    params: Params,
    convs: Vec<Conv>,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let widths = [3, 8, 16, 16];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| b.conv(&format!("feat{i}"), w[0], w[1], 3, lrelu_gain()))
            .collect();
        Self { params: b.finish(), convs }
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Feature maps at every scale, pixels first. Parameters enter as constants.
    pub fn features(&self, g: &mut Graph, images: Var) -> Vec<Var> {
        let p = self.params.bind(g, false);
        let mut out = vec![images];
        let mut h = images;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2x(h);
            }
            let c = conv.forward(g, &p, h);
            h = g.leaky_relu(c, LEAK);
            out.push(h);
        }
        out
    }

    /// Per-sample distances `[N]` between two equally shaped image batches.
    pub fn distance_graph(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y);
            let sq = g.square(d);
            let m = g.mean_per_sample(sq);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        total.expect("at least one scale")
    }

    /// Flattened, scale-weighted features such that `d(a, b) = ‖e(a) − e(b)‖²`.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(images)?);
        let feats = self.features(&mut g, x);
        let mut out = vec![Vec::new(); images.len()];
        for f in feats {
            let t = g.value(f);
            let w = 1.0 / (t.per_sample() as f64).sqrt();
            for (i, row) in out.iter_mut().enumerate() {
                row.extend(t.row(i).iter().map(|v| v * w));
            }
        }
        Ok(out)
    }

    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.size() != b.size() {
            return Err(Error::ResolutionMismatch(a.size(), b.size()));
        }
        let mut g = Graph::new();
        let ta = g.constant(batch_tensor(&[a])?);
        let tb = g.constant(batch_tensor(&[b])?);
        let d = self.distance_graph(&mut g, ta, tb);
        Ok(g.value(d).item())
    }

    /// Distances between batch entries `(i, j)` of one image tensor, differentiable
    /// with respect to the images.
    pub fn pair_distances(&self, g: &mut Graph, images: Var, pairs: &[(usize, usize)]) -> Var {
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = g.select(images, &left);
        let b = g.select(images, &right);
        self.distance_graph(g, a, b)
    }
}

/// Squared Euclidean distance between two embeddings from [`PerceptualExtractor::embed`].
pub fn embedded_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Tensor helper for callers that already hold raw batches.
pub fn distance_tensors(ex: &PerceptualExtractor, a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let ta = g.constant(a.clone());
    let tb = g.constant(b.clone());
    let d = ex.distance_graph(&mut g, ta, tb);
    g.value(d).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;
    use rand::Rng;

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = seeded(seed);
        let px = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        Image::new(size, Domain::Lower, "r", px).unwrap()
    }

    #[test]
    fn identity_and_symmetry() {
        let ex = PerceptualExtractor::default();
        let a = random_image(1, 16);
        let b = random_image(2, 16);
        assert_eq!(ex.distance(&a, &a).unwrap(), 0.0);
        let ab = ex.distance(&a, &b).unwrap();
        let ba = ex.distance(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn embedding_reproduces_distance() {
        let ex = PerceptualExtractor::default();
        let a = random_image(3, 16);
        let b = random_image(4, 16);
        let e = ex.embed(&[&a, &b]).unwrap();
        let d = ex.distance(&a, &b).unwrap();
        assert!((embedded_distance(&e[0], &e[1]) - d).abs() < 1e-10);
    }

    #[test]
    fn increases_along_interpolation_path() {
        let ex = PerceptualExtractor::default();
        let a = random_image(5, 32);
        let b = random_image(6, 32);
        let mut last = 0.0;
        for k in 1..=5 {
            let t = k as f64 / 5.0;
            let px = a.pixels().iter().zip(b.pixels()).map(|(x, y)| x + t * (y - x)).collect();
            let p = Image::new(32, Domain::Lower, "p", px).unwrap();
            let d = ex.distance(&a, &p).unwrap();
            assert!(d > last, "t={t}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let ex = PerceptualExtractor::default();
        assert!(ex.distance(&random_image(1, 8), &random_image(1, 16)).is_err());
    }
}
