//! Paired-outfit corpora: synthetic generation with a known compatibility rule,
//! ingestion of user-supplied data, entity deduplication, and train/test splits.

mod attributes;
mod dedup;
mod split;
mod store;
mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use attributes::{rgb_hue, rgb_hue_sat, CompatibilityRule, GarmentAttributes, PaletteFamily, Pattern, Template, FAMILIES};
pub use dedup::{merge_duplicate_entities, EntityMap, DEFAULT_DEDUP_THRESHOLD};
pub use split::{split_pairs, Direction, SplitManifest};
pub use store::{ingest_real_dataset, load_dataset, read_split, write_dataset, write_split, ATTRIBUTES_FILE, PAIRS_FILE, SPLIT_FILE};
pub use synthetic::{generate_synthetic_dataset, render_garment, DatasetSpec};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::perceptual::PerceptualExtractor;

/// One distinct garment with its image views and, for synthetic data, attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Garment {
    pub id: String,
    pub views: Vec<Image>,
    pub attributes: Option<GarmentAttributes>,
}

impl Garment {
    pub fn image(&self) -> &Image {
        &self.views[0]
    }

    pub fn domain(&self) -> Domain {
        self.views[0].domain
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutfitPair {
    pub upper: String,
    pub lower: String,
    pub compatible: bool,
}

impl OutfitPair {
    pub fn item(&self, domain: Domain) -> &str {
        match domain {
            Domain::Upper => &self.upper,
            Domain::Lower => &self.lower,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutfitDataset {
    pub resolution: usize,
    pub uppers: Vec<Garment>,
    pub lowers: Vec<Garment>,
    pub pairs: Vec<OutfitPair>,
    pub rule: Option<CompatibilityRule>,
}

impl OutfitDataset {
    pub fn garments(&self, domain: Domain) -> &[Garment] {
        match domain {
            Domain::Upper => &self.uppers,
            Domain::Lower => &self.lowers,
        }
    }

    pub fn index(&self, domain: Domain) -> HashMap<&str, usize> {
        self.garments(domain).iter().enumerate().map(|(i, g)| (g.id.as_str(), i)).collect()
    }

    pub fn garment(&self, domain: Domain, id: &str) -> Option<&Garment> {
        self.garments(domain).iter().find(|g| g.id == id)
    }

    /// Collapses near-identical garments within each domain into one entity with
    /// several views and rewrites the pair list. Returns how many garments were absorbed.
    pub fn merge_duplicates(&mut self, threshold: f64, extractor: &PerceptualExtractor) -> Result<usize> {
        let before = self.uppers.len() + self.lowers.len();
        let mut renames: HashMap<(Domain, String), String> = HashMap::new();
        for domain in [Domain::Upper, Domain::Lower] {
            let garments = std::mem::take(match domain {
                Domain::Upper => &mut self.uppers,
                Domain::Lower => &mut self.lowers,
            });
            if garments.is_empty() {
                continue;
            }
            let images: Vec<Image> = garments.iter().map(|g| g.image().clone()).collect();
            let map = merge_duplicate_entities(&images, threshold, extractor)?;
            let mut merged: BTreeMap<String, Garment> = BTreeMap::new();
            for (g, id) in garments.into_iter().zip(&map.ids) {
                renames.insert((domain, g.id.clone()), id.clone());
                let entry = merged.entry(id.clone()).or_insert_with(|| Garment { id: id.clone(), views: Vec::new(), attributes: g.attributes });
                entry.views.extend(g.views.into_iter().map(|mut v| {
                    v.entity_id = id.clone();
                    v
                }));
            }
            let out: Vec<Garment> = merged.into_values().collect();
            match domain {
                Domain::Upper => self.uppers = out,
                Domain::Lower => self.lowers = out,
            }
        }
        let mut seen = std::collections::HashSet::new();
        let pairs = std::mem::take(&mut self.pairs);
        for mut p in pairs {
            if let Some(u) = renames.get(&(Domain::Upper, p.upper.clone())) {
                p.upper = u.clone();
            }
            if let Some(l) = renames.get(&(Domain::Lower, p.lower.clone())) {
                p.lower = l.clone();
            }
            if seen.insert((p.upper.clone(), p.lower.clone())) {
                self.pairs.push(p);
            }
        }
        Ok(before - self.uppers.len() - self.lowers.len())
    }

    /// Attribute lookup keyed by `(domain, entity id)`.
    pub fn attribute_store(&self) -> AttributeStore {
        let mut map = HashMap::new();
        for d in [Domain::Upper, Domain::Lower] {
            for g in self.garments(d) {
                if let Some(a) = g.attributes {
                    map.insert((d, g.id.clone()), a);
                }
            }
        }
        AttributeStore { map }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttributeStore {
    map: HashMap<(Domain, String), GarmentAttributes>,
}

impl AttributeStore {
    pub fn get(&self, domain: Domain, id: &str) -> Option<&GarmentAttributes> {
        self.map.get(&(domain, id.to_string()))
    }

    pub fn insert(&mut self, domain: Domain, id: impl Into<String>, attrs: GarmentAttributes) {
        self.map.insert((domain, id.into()), attrs);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Histogram of matches-per-entity for each domain.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiplicityStats {
    pub upper: BTreeMap<usize, usize>,
    pub lower: BTreeMap<usize, usize>,
}

impl MultiplicityStats {
    pub fn histogram(&self, domain: Domain) -> &BTreeMap<usize, usize> {
        match domain {
            Domain::Upper => &self.upper,
            Domain::Lower => &self.lower,
        }
    }

    /// Fraction of entities in `domain` with exactly one match.
    pub fn single_match_fraction(&self, domain: Domain) -> f64 {
        let h = self.histogram(domain);
        let total: usize = h.values().sum();
        if total == 0 {
            return 0.0;
        }
        *h.get(&1).unwrap_or(&0) as f64 / total as f64
    }
}

pub fn match_multiplicity_stats(pairs: &[OutfitPair]) -> Result<MultiplicityStats> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to summarise".into()));
    }
    let mut per: [HashMap<&str, usize>; 2] = [HashMap::new(), HashMap::new()];
    for p in pairs {
        *per[0].entry(p.upper.as_str()).or_default() += 1;
        *per[1].entry(p.lower.as_str()).or_default() += 1;
    }
    let hist = |m: &HashMap<&str, usize>| {
        let mut h = BTreeMap::new();
        for &c in m.values() {
            *h.entry(c).or_default() += 1;
        }
        h
    };
    Ok(MultiplicityStats { upper: hist(&per[0]), lower: hist(&per[1]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(u: &str, l: &str) -> OutfitPair {
        OutfitPair { upper: u.into(), lower: l.into(), compatible: true }
    }

    #[test]
    fn merging_duplicates_rewrites_pairs() {
        let img = |d: Domain, id: &str, v: f64| Image::filled(8, d, id, [v, 0.2, -0.4]);
        let garment = |d: Domain, id: &str, v: f64| Garment { id: id.into(), views: vec![img(d, id, v)], attributes: None };
        let mut ds = OutfitDataset {
            resolution: 8,
            uppers: vec![garment(Domain::Upper, "a", 0.5), garment(Domain::Upper, "a_copy", 0.5), garment(Domain::Upper, "b", -0.9)],
            lowers: vec![garment(Domain::Lower, "x", 0.1)],
            pairs: vec![pair("a", "x"), pair("a_copy", "x"), pair("b", "x")],
            rule: None,
        };
        let absorbed = ds.merge_duplicates(DEFAULT_DEDUP_THRESHOLD, crate::losses::default_extractor()).unwrap();
        assert_eq!(absorbed, 1);
        assert_eq!(ds.uppers.len(), 2);
        let merged = ds.uppers.iter().find(|g| g.views.len() == 2).unwrap();
        assert!(merged.views.iter().all(|v| v.entity_id == merged.id));
        assert_eq!(ds.pairs.len(), 2);
        assert!(ds.pairs.iter().all(|p| ds.garment(Domain::Upper, &p.upper).is_some()));
    }

    #[test]
    fn one_pair_per_entity() {
        let pairs: Vec<_> = (0..5).map(|i| pair(&format!("u{i}"), &format!("l{i}"))).collect();
        let s = match_multiplicity_stats(&pairs).unwrap();
        assert_eq!(s.upper, BTreeMap::from([(1, 5)]));
        assert_eq!(s.lower, BTreeMap::from([(1, 5)]));
    }

    #[test]
    fn mixed_multiplicity() {
        let pairs = vec![pair("a", "x"), pair("a", "y"), pair("b", "x"), pair("c", "z")];
        let s = match_multiplicity_stats(&pairs).unwrap();
        assert_eq!(s.upper, BTreeMap::from([(1, 2), (2, 1)]));
        assert_eq!(s.lower, BTreeMap::from([(1, 2), (2, 1)]));
        assert!((s.single_match_fraction(Domain::Upper) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(match_multiplicity_stats(&[]).is_err());
    }
}
