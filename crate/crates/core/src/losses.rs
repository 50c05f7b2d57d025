//! Training objectives, each in two forms: a plain function over scores (used by
//! tests and reports) and a graph builder used by the trainer.
//!
//! All objectives are written to be minimised. The discriminator losses take
//! probabilities in the plain form and logits in the graph form.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::graph::Var;
use crate::image::Image;
use crate::perceptual::PerceptualExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Diversity coefficient.
    pub lambda1: f64,
    /// Compatibility coefficient.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Per-iteration loss values. `total = adv + lambda1·div + lambda2·cmp`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dis: f64,
    pub cmp_dis: f64,
    pub adv: f64,
    pub div: f64,
    pub cmp: f64,
    pub total: f64,
    /// Gradient-penalty part of the critic step (already included in `cmp_dis`'s update, not in its value).
    pub gp: f64,
}

fn check_probabilities(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{name}: empty score batch")));
    }
    if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::InvalidArgument(format!("{name}: score {bad} outside (0, 1)")));
    }
    Ok(())
}

fn mean_of(name: &str, s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::InvalidArgument(format!("{name}: empty score batch")));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// `−E[log D(w_orig)] − E[log(1 − D(w))]`.
pub fn loss_dse(real: &[f64], fake: &[f64]) -> Result<f64> {
    check_probabilities("loss_dse real", real)?;
    check_probabilities("loss_dse fake", fake)?;
    let r = real.iter().map(|p| -p.ln()).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|p| -(1.0 - p).ln()).sum::<f64>() / fake.len() as f64;
    Ok(r + f)
}

/// Non-saturating generator loss `−E[log D(w)]`.
pub fn loss_adv(fake: &[f64]) -> Result<f64> {
    check_probabilities("loss_adv", fake)?;
    Ok(fake.iter().map(|p| -p.ln()).sum::<f64>() / fake.len() as f64)
}

/// `(E s_rc − E s_rnc) + (E s_rc − E s_fc)`.
pub fn loss_cmp_dis(s_rc: &[f64], s_rnc: &[f64], s_fc: &[f64]) -> Result<f64> {
    let rc = mean_of("s_rc", s_rc)?;
    Ok((rc - mean_of("s_rnc", s_rnc)?) + (rc - mean_of("s_fc", s_fc)?))
}

/// `(E s_fc − E s_rc) + (E s_fc − E s_fnc)`.
pub fn loss_cmp(s_fc: &[f64], s_rc: &[f64], s_fnc: &[f64]) -> Result<f64> {
    let fc = mean_of("s_fc", s_fc)?;
    Ok((fc - mean_of("s_rc", s_rc)?) + (fc - mean_of("s_fnc", s_fnc)?))
}

/// Negative mean distance over all unordered pairs of `images`.
pub fn loss_div(images: &[&Image], distance: impl Fn(&Image, &Image) -> Result<f64>) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 outputs, got {}", images.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += distance(images[i], images[j])?;
            count += 1;
        }
    }
    Ok(-sum / count as f64)
}

pub fn loss_total(adv: f64, div: f64, cmp: f64, weights: &LossWeights) -> f64 {
    adv + weights.lambda1 * div + weights.lambda2 * cmp
}

/// Shared perceptual feature extractor used by the diversity loss and metric.
pub fn default_extractor() -> &'static PerceptualExtractor {
    static EX: OnceLock<PerceptualExtractor> = OnceLock::new();
    EX.get_or_init(PerceptualExtractor::default)
}

/// Distance under the default frozen perceptual extractor.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    default_extractor().distance(a, b)
}

/// Graph form of [`loss_dse`] over logits `[N, 1]`.
pub fn dse_graph(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let neg = g.scale(real_logits, -1.0);
    let r = g.softplus(neg);
    let r = g.mean(r);
    let f = g.softplus(fake_logits);
    let f = g.mean(f);
    g.add(r, f)
}

/// Graph form of [`loss_adv`] over logits.
pub fn adv_graph(g: &mut Graph, fake_logits: Var) -> Var {
    let neg = g.scale(fake_logits, -1.0);
    let l = g.softplus(neg);
    g.mean(l)
}

/// `2·E[first] − E[second] − E[third]`: the shared shape of both critic objectives.
fn contrast(g: &mut Graph, anchor: Var, a: Var, b: Var) -> Var {
    let m0 = g.mean(anchor);
    let m0 = g.scale(m0, 2.0);
    let ma = g.mean(a);
    let mb = g.mean(b);
    let t = g.sub(m0, ma);
    g.sub(t, mb)
}

pub fn cmp_dis_graph(g: &mut Graph, s_rc: Var, s_rnc: Var, s_fc: Var) -> Var {
    contrast(g, s_rc, s_rnc, s_fc)
}

pub fn cmp_graph(g: &mut Graph, s_fc: Var, s_rc: Var, s_fnc: Var) -> Var {
    contrast(g, s_fc, s_rc, s_fnc)
}

/// Critic objective without the real-incompatible term: `E s_rc − E s_fc`.
pub fn cmp_dis_plain_graph(g: &mut Graph, s_rc: Var, s_fc: Var) -> Var {
    let a = g.mean(s_rc);
    let b = g.mean(s_fc);
    g.sub(a, b)
}

/// Generator objective without the fake-incompatible term: `E s_fc − E s_rc`.
pub fn cmp_plain_graph(g: &mut Graph, s_fc: Var, s_rc: Var) -> Var {
    let a = g.mean(s_fc);
    let b = g.mean(s_rc);
    g.sub(a, b)
}

/// Diversity loss over `[B·n, 3, S, S]` outputs laid out input-major (`n` per
/// input): negative mean distance over each input's unordered pairs, averaged
/// over inputs.
pub fn div_graph(g: &mut Graph, extractor: &PerceptualExtractor, outputs: Var, n: usize) -> Var {
    let total = g.value(outputs).batch();
    assert!(n >= 2 && total.is_multiple_of(n), "diversity needs n >= 2 outputs per input");
    let mut pairs = Vec::new();
    for b in 0..total / n {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((b * n + i, b * n + j));
            }
        }
    }
    let d = extractor.pair_distances(g, outputs, &pairs);
    let m = g.mean(d);
    g.scale(m, -1.0)
}

/// `adv + lambda1·div + lambda2·cmp`, skipping absent terms.
pub fn total_graph(g: &mut Graph, adv: Var, div: Option<Var>, cmp: Option<Var>, weights: &LossWeights) -> Var {
    let mut t = adv;
    if let Some(d) = div {
        let s = g.scale(d, weights.lambda1);
        t = g.add(t, s);
    }
    if let Some(c) = cmp {
        let s = g.scale(c, weights.lambda2);
        t = g.add(t, s);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;
    use crate::tensor::Tensor;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn dse_examples() {
        assert!((loss_dse(&[0.5; 3], &[0.5; 2]).unwrap() - 2.0 * LN2).abs() < 1e-12);
        assert!(loss_dse(&[1.0 - 1e-12], &[1e-12]).unwrap() < 1e-9);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0 - (0.7f64.ln() + 0.9f64.ln()) / 2.0;
        let got = loss_dse(&[0.9, 0.8], &[0.3, 0.1]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(loss_dse(&[1.0], &[0.5]).is_err());
        assert!(loss_dse(&[], &[0.5]).is_err());
    }

    #[test]
    fn adv_examples() {
        assert!(loss_adv(&[1.0 - 1e-12; 4]).unwrap() < 1e-9);
        assert!((loss_adv(&[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        assert!((loss_adv(&[0.25, 0.75]).unwrap() - 0.8370).abs() < 1e-4);
        assert!(loss_adv(&[0.0]).is_err());
    }

    #[test]
    fn critic_examples() {
        assert_eq!(loss_cmp_dis(&[0.3; 2], &[0.3; 5], &[0.3; 3]).unwrap(), 0.0);
        assert!((loss_cmp_dis(&[0.2], &[0.9], &[0.7]).unwrap() + 1.2).abs() < 1e-12);
        assert!((loss_cmp(&[0.7], &[0.2], &[0.9]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(loss_cmp(&[-1.5; 3], &[-1.5], &[-1.5; 2]).unwrap(), 0.0);
        assert!(loss_cmp(&[], &[0.1], &[0.2]).is_err());
        let a = loss_cmp_dis(&[0.2, 0.4], &[0.9], &[0.7, 0.1]).unwrap();
        let b = loss_cmp_dis(&[0.4, 0.8], &[1.8], &[1.4, 0.2]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn div_examples() {
        let imgs: Vec<Image> = (0..3).map(|i| Image::filled(4, Domain::Lower, format!("{i}"), [0.0; 3])).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(loss_div(&refs, perceptual_distance).unwrap(), 0.0);
        let table = |a: &Image, b: &Image| -> Result<f64> {
            Ok(match (a.entity_id.as_str(), b.entity_id.as_str()) {
                ("0", "1") => 0.2,
                ("0", "2") => 0.4,
                _ => 0.6,
            })
        };
        assert!((loss_div(&refs, table).unwrap() + 0.4).abs() < 1e-12);
        assert!((loss_div(&refs[..2], |_, _| Ok(0.4)).unwrap() + 0.4).abs() < 1e-12);
        assert!(loss_div(&refs[..1], table).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((loss_total(0.5, -0.2, 0.1, &w) - 0.6).abs() < 1e-12);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        assert_eq!(loss_total(0.7, -3.0, 9.0, &zero), 0.7);
        assert_eq!(loss_total(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let logits = [0.3, -1.2, 2.0];
        let probs: Vec<f64> = logits.iter().map(|&l| crate::graph::sigmoid(l)).collect();
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(vec![2, 1], logits[..2].to_vec()));
        let f = g.constant(Tensor::new(vec![1, 1], logits[2..].to_vec()));
        let d = dse_graph(&mut g, r, f);
        assert!((g.value(d).item() - loss_dse(&probs[..2], &probs[2..]).unwrap()).abs() < 1e-12);
        let a = adv_graph(&mut g, r);
        assert!((g.value(a).item() - loss_adv(&probs[..2]).unwrap()).abs() < 1e-12);
        let s1 = g.constant(Tensor::new(vec![2, 1], vec![0.1, 0.3]));
        let s2 = g.constant(Tensor::new(vec![1, 1], vec![0.9]));
        let s3 = g.constant(Tensor::new(vec![3, 1], vec![0.7, 0.4, -0.2]));
        let cd = cmp_dis_graph(&mut g, s1, s2, s3);
        assert!((g.value(cd).item() - loss_cmp_dis(&[0.1, 0.3], &[0.9], &[0.7, 0.4, -0.2]).unwrap()).abs() < 1e-12);
        let c = cmp_graph(&mut g, s3, s1, s2);
        assert!((g.value(c).item() - loss_cmp(&[0.7, 0.4, -0.2], &[0.1, 0.3], &[0.9]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn div_graph_matches_pairwise_mean() {
        let ex = PerceptualExtractor::default();
        let imgs: Vec<Image> = (0..4)
            .map(|i| Image::filled(8, Domain::Lower, format!("{i}"), [0.1 * i as f64, -0.2, 0.3 * (i % 2) as f64]))
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(crate::image::batch_tensor(&refs).unwrap());
        let v = div_graph(&mut g, &ex, x, 2);
        let expected = (loss_div(&refs[..2], |a, b| ex.distance(a, b)).unwrap() + loss_div(&refs[2..], |a, b| ex.distance(a, b)).unwrap()) / 2.0;
        assert!((g.value(v).item() - expected).abs() < 1e-12);
    }
}
