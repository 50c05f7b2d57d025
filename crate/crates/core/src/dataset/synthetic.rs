//! Procedural garments: filled silhouettes coloured from a palette family and
//! optionally striped or dotted, paired according to a [`CompatibilityRule`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{CompatibilityRule, GarmentAttributes, Pattern, Template, FAMILIES};
use super::{Garment, OutfitDataset, OutfitPair};
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::rng::{derive_seed, seeded, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_upper: usize,
    pub n_lower: usize,
    /// Matches-per-upper → number of upper entities with that many matches.
    pub multiplicity: BTreeMap<usize, usize>,
    pub rule: CompatibilityRule,
    pub seed: u64,
    pub resolution: usize,
    /// Probability that a garment carries stripes or dots.
    pub patterned_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_upper: 100,
            n_lower: 100,
            multiplicity: BTreeMap::from([(1, 58), (2, 26), (3, 16)]),
            rule: CompatibilityRule::standard(),
            seed: 7,
            resolution: 32,
            patterned_fraction: 0.4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_upper == 0 || self.n_lower == 0 {
            return Err(Error::Config("entity counts must be at least 1".into()));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution must be a power of two >= 8, got {}", self.resolution)));
        }
        if !(0.0..=1.0).contains(&self.patterned_fraction) {
            return Err(Error::Config("patterned_fraction must lie in [0, 1]".into()));
        }
        if self.multiplicity.contains_key(&0) {
            return Err(Error::Config("multiplicity buckets start at 1 match".into()));
        }
        let total: usize = self.multiplicity.values().sum();
        if total != self.n_upper {
            return Err(Error::Config(format!(
                "multiplicity histogram covers {total} uppers but n_upper = {}",
                self.n_upper
            )));
        }
        if let Some((&k, _)) = self.multiplicity.iter().next_back() {
            if k > self.n_lower {
                return Err(Error::Infeasible(format!("{k} matches requested for one upper but only {} lower entities exist", self.n_lower)));
            }
        }
        Ok(())
    }
}

fn entity_id(domain: Domain, i: usize) -> String {
    match domain {
        Domain::Upper => format!("u{i:04}"),
        Domain::Lower => format!("l{i:04}"),
    }
}

fn sample_attributes(domain: Domain, family_slot: usize, patterned_fraction: f64, rng: &mut SeededRng) -> GarmentAttributes {
    let family = FAMILIES[family_slot % FAMILIES.len()];
    let templates = Template::for_domain(domain);
    let template = templates[rng.random_range(0..templates.len())];
    let pattern = if rng.random_bool(patterned_fraction) {
        if rng.random_bool(0.5) { Pattern::Stripes } else { Pattern::Dots }
    } else {
        Pattern::Solid
    };
    let base = family.base_rgb();
    let shade = base.map(|c| (c + rng.random_range(-0.07..0.07)).clamp(0.0, 1.0));
    GarmentAttributes { template, family, pattern, shade }
}

/// Silhouette jitter drawn per entity.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    scale: f64,
    dx: f64,
    phase: f64,
}

fn inside(template: Template, geo: Geometry, u: f64, v: f64) -> bool {
    let s = geo.scale;
    let du = (u - 0.5 - geo.dx).abs();
    match template {
        Template::Shirt => {
            let torso = du <= 0.2 * s && (0.18..=0.18 + 0.66 * s).contains(&v);
            let sleeves = du <= 0.38 * s && (0.18..=0.18 + 0.2 * s).contains(&v);
            let neck = (u - 0.5 - geo.dx).powi(2) + (v - 0.18).powi(2) <= 0.07 * 0.07;
            (torso || sleeves) && !neck
        }
        Template::Sweater => {
            let torso = du <= 0.2 * s && (0.18..=0.18 + 0.66 * s).contains(&v);
            let shoulders = du <= 0.33 * s && (0.18..=0.26).contains(&v);
            let sleeves = du >= 0.22 * s && du <= 0.33 * s && (0.18..=0.18 + 0.6 * s).contains(&v);
            let neck = (u - 0.5 - geo.dx).powi(2) + (v - 0.18).powi(2) <= 0.06 * 0.06;
            (torso || shoulders || sleeves) && !neck
        }
        Template::Trousers | Template::Shorts => {
            let (half, len) = if template == Template::Trousers { (0.22 * s, 0.82 * s) } else { (0.25 * s, 0.42 * s) };
            let waist = du <= half && (0.10..=0.2).contains(&v);
            let legs = du >= 0.025 && du <= half && (0.2..=0.1 + len).contains(&v);
            waist || legs
        }
        Template::Skirt => {
            let len = 0.62 * s;
            if !(0.15..=0.15 + len).contains(&v) {
                return false;
            }
            let t = (v - 0.15) / len;
            du <= 0.17 * s + t * 0.19 * s
        }
    }
}

/// Renders one garment as `[3, S, S]` pixels in `[-1, 1]` on a white background.
pub fn render_garment(attrs: &GarmentAttributes, size: usize, rng: &mut SeededRng) -> Vec<f64> {
    let geo = Geometry { scale: rng.random_range(0.9..1.06), dx: rng.random_range(-0.03..0.03), phase: rng.random_range(0.0..1.0) };
    let tint = attrs.shade.map(|c| 0.45 * c + 0.55);
    let sf = size as f64;
    let stripe_period = (sf / 8.0).max(2.0);
    let dot_period = (sf / 5.0).max(3.0);
    let mut px = vec![1.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / sf, (y as f64 + 0.5) / sf);
            if !inside(attrs.template, geo, u, v) {
                continue;
            }
            let light = match attrs.pattern {
                Pattern::Solid => false,
                Pattern::Stripes => ((y as f64 + geo.phase * stripe_period) / (stripe_period / 2.0)).floor() as i64 % 2 == 1,
                Pattern::Dots => {
                    let fx = (x as f64 + geo.phase * dot_period) / dot_period;
                    let fy = y as f64 / dot_period;
                    let (cx, cy) = (fx.fract() - 0.5, fy.fract() - 0.5);
                    cx * cx + cy * cy <= 0.28 * 0.28
                }
            };
            let col = if light { tint } else { attrs.shade };
            for c in 0..3 {
                px[(c * size + y) * size + x] = col[c] * 2.0 - 1.0;
            }
        }
    }
    px
}

fn build_garments(domain: Domain, n: usize, spec: &DatasetSpec, rng: &mut SeededRng) -> Result<Vec<Garment>> {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    (0..n)
        .map(|i| {
            let id = entity_id(domain, i);
            let mut erng = seeded(derive_seed(spec.seed, &id));
            let attrs = sample_attributes(domain, slots[i], spec.patterned_fraction, &mut erng);
            let px = render_garment(&attrs, spec.resolution, &mut erng);
            let image = Image::new(spec.resolution, domain, id.clone(), px)?;
            Ok(Garment { id, views: vec![image], attributes: Some(attrs) })
        })
        .collect()
}

/// Builds a corpus whose per-upper match counts follow `spec.multiplicity` exactly
/// and whose pairs all satisfy `spec.rule`.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<OutfitDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let uppers = build_garments(Domain::Upper, spec.n_upper, spec, &mut rng)?;
    let lowers = build_garments(Domain::Lower, spec.n_lower, spec, &mut rng)?;

    let compatible_count = |u: &Garment| {
        let ua = u.attributes.as_ref().expect("synthetic attributes");
        lowers.iter().filter(|l| spec.rule.is_compatible(ua, l.attributes.as_ref().expect("synthetic attributes"))).count()
    };
    // Larger match counts go to uppers with more compatible lowers; ties are random.
    let mut order: Vec<(usize, u64, usize)> = uppers.iter().enumerate().map(|(i, u)| (compatible_count(u), rng.random(), i)).collect();
    order.sort_unstable_by(|a, b| b.cmp(a));
    let counts: Vec<usize> = spec.multiplicity.iter().rev().flat_map(|(&k, &n)| std::iter::repeat_n(k, n)).collect();
    let mut need_of = vec![0; uppers.len()];
    for (&(_, _, i), &k) in order.iter().zip(&counts) {
        need_of[i] = k;
    }

    let mut uses = vec![0usize; lowers.len()];
    let mut pairs = Vec::new();
    for (u, &need) in uppers.iter().zip(&need_of) {
        let ua = u.attributes.as_ref().expect("synthetic attributes");
        let mut candidates: Vec<(usize, u64, usize)> = lowers
            .iter()
            .enumerate()
            .filter(|(_, l)| spec.rule.is_compatible(ua, l.attributes.as_ref().expect("synthetic attributes")))
            .map(|(j, _)| (uses[j], rng.random::<u64>(), j))
            .collect();
        if candidates.len() < need {
            return Err(Error::Infeasible(format!(
                "upper {} needs {need} compatible lowers but only {} exist",
                u.id,
                candidates.len()
            )));
        }
        candidates.sort_unstable();
        for &(_, _, j) in candidates.iter().take(need) {
            uses[j] += 1;
            let la = lowers[j].attributes.as_ref().expect("synthetic attributes");
            pairs.push(OutfitPair { upper: u.id.clone(), lower: lowers[j].id.clone(), compatible: spec.rule.is_compatible(ua, la) });
        }
    }
    Ok(OutfitDataset { resolution: spec.resolution, uppers, lowers, pairs, rule: Some(spec.rule.clone()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::match_multiplicity_stats;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_upper: 20,
            n_lower: 24,
            multiplicity: BTreeMap::from([(1, 12), (2, 5), (3, 3)]),
            resolution: 16,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_dataset(&small_spec()).unwrap();
        let b = generate_synthetic_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&DatasetSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.uppers[0].views, c.uppers[0].views);
    }

    #[test]
    fn histogram_is_hit_exactly() {
        let spec = small_spec();
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let stats = match_multiplicity_stats(&ds.pairs).unwrap();
        assert_eq!(stats.upper, spec.multiplicity);
    }

    #[test]
    fn single_bucket_gives_one_pair_per_upper() {
        let spec = DatasetSpec { multiplicity: BTreeMap::from([(1, 20)]), ..small_spec() };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(ds.pairs.len(), 20);
        let stats = match_multiplicity_stats(&ds.pairs).unwrap();
        assert_eq!(stats.upper, BTreeMap::from([(1, 20)]));
    }

    #[test]
    fn labels_follow_rule_and_incompatible_combinations_exist() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let rule = ds.rule.clone().unwrap();
        assert!(ds.pairs.iter().all(|p| p.compatible));
        let mut incompatible = 0;
        for u in &ds.uppers {
            for l in &ds.lowers {
                if !rule.is_compatible(u.attributes.as_ref().unwrap(), l.attributes.as_ref().unwrap()) {
                    incompatible += 1;
                }
            }
        }
        assert!(incompatible > 0);
    }

    #[test]
    fn pixels_in_range_and_background_white() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        for g in ds.uppers.iter().chain(&ds.lowers) {
            let img = g.image();
            assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(img.at(0, 0, 0), 1.0);
            assert_eq!(g.domain(), g.attributes.unwrap().template.domain());
        }
    }

    #[test]
    fn infeasible_histograms_are_rejected() {
        let spec = DatasetSpec { multiplicity: BTreeMap::from([(30, 20)]), ..small_spec() };
        assert!(matches!(generate_synthetic_dataset(&spec), Err(Error::Infeasible(_))));
        // Fits the lower count but not the number of compatible lowers per upper.
        let spec = DatasetSpec { multiplicity: BTreeMap::from([(20, 20)]), ..small_spec() };
        assert!(matches!(generate_synthetic_dataset(&spec), Err(Error::Infeasible(_))));
        let spec = DatasetSpec { multiplicity: BTreeMap::from([(1, 3)]), ..small_spec() };
        assert!(matches!(generate_synthetic_dataset(&spec), Err(Error::Config(_))));
    }
}
