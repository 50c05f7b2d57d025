use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::OutfitPair;
use crate::error::{Error, Result};
use crate::image::Domain;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    UpperToLower,
    LowerToUpper,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::UpperToLower => Domain::Upper,
            Direction::LowerToUpper => Domain::Lower,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "uppertolower" | "u2l" => Ok(Direction::UpperToLower),
            "lowertoupper" | "l2u" => Ok(Direction::LowerToUpper),
            _ => Err(Error::Config(format!("unknown direction {s:?}"))),
        }
    }
}

/// Pair indices (into the dataset's pair list) for each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub direction: Direction,
    pub ratio: f64,
    pub seed: u64,
    pub train_pairs: Vec<usize>,
    pub test_pairs: Vec<usize>,
}

impl SplitManifest {
    pub fn train<'a>(&self, pairs: &'a [OutfitPair]) -> Vec<&'a OutfitPair> {
        self.train_pairs.iter().map(|&i| &pairs[i]).collect()
    }

    pub fn test<'a>(&self, pairs: &'a [OutfitPair]) -> Vec<&'a OutfitPair> {
        self.test_pairs.iter().map(|&i| &pairs[i]).collect()
    }

    /// Source-domain entity ids on each side.
    pub fn source_entities<'a>(&self, pairs: &'a [OutfitPair]) -> (HashSet<&'a str>, HashSet<&'a str>) {
        let d = self.direction.source();
        let collect = |idx: &[usize]| idx.iter().map(|&i| pairs[i].item(d)).collect();
        (collect(&self.train_pairs), collect(&self.test_pairs))
    }
}

/// Splits pairs so that no source-domain entity appears on both sides. `ratio` is
/// the train fraction; the test side is filled greedily with whole entity groups,
/// visited in seeded random order, up to `round(total × (1 − ratio))` pairs.
pub fn split_pairs(pairs: &[OutfitPair], direction: Direction, ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty pair list".into()));
    }
    let source = direction.source();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.item(source)).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Data(format!("need at least 2 source entities to split, found {}", groups.len())));
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(&mut seeded(seed));

    let target = ((pairs.len() as f64) * (1.0 - ratio)).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in order {
        if test.len() + group.len() <= target {
            test.extend(group);
        } else {
            train.extend(group);
        }
    }
    if test.is_empty() || train.is_empty() {
        return Err(Error::Data(format!(
            "entity groups too coarse to form both splits ({} train / {} test pairs)",
            train.len(),
            test.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest { direction, ratio, seed, train_pairs: train, test_pairs: test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(u: &str, l: &str) -> OutfitPair {
        OutfitPair { upper: u.into(), lower: l.into(), compatible: true }
    }

    fn disjoint_by_scan(m: &SplitManifest, pairs: &[OutfitPair]) -> bool {
        let d = m.direction.source();
        m.train_pairs.iter().all(|&i| m.test_pairs.iter().all(|&j| pairs[i].item(d) != pairs[j].item(d)))
    }

    #[test]
    fn exact_division() {
        let pairs: Vec<_> = (0..100).map(|i| pair(&format!("u{i}"), &format!("l{i}"))).collect();
        let m = split_pairs(&pairs, Direction::UpperToLower, 0.8, 1).unwrap();
        assert_eq!((m.train_pairs.len(), m.test_pairs.len()), (80, 20));
    }

    #[test]
    fn dominant_entity_stays_whole() {
        let mut pairs: Vec<_> = (0..30).map(|i| pair("big", &format!("l{i}"))).collect();
        pairs.extend((0..70).map(|i| pair(&format!("u{i}"), &format!("m{i}"))));
        for seed in 0..10 {
            let m = split_pairs(&pairs, Direction::UpperToLower, 0.8, seed).unwrap();
            assert!(disjoint_by_scan(&m, &pairs));
            let in_train = m.train_pairs.iter().filter(|&&i| pairs[i].upper == "big").count();
            assert!(in_train == 0 || in_train == 30);
        }
    }

    #[test]
    fn lower_direction_uses_lower_entities() {
        let pairs: Vec<_> = (0..40).map(|i| pair(&format!("u{}", i % 3), &format!("l{i}"))).collect();
        let m = split_pairs(&pairs, Direction::LowerToUpper, 0.75, 4).unwrap();
        assert_eq!(m.test_pairs.len(), 10);
        assert!(disjoint_by_scan(&m, &pairs));
    }

    #[test]
    fn errors() {
        let one: Vec<_> = (0..5).map(|i| pair("u", &format!("l{i}"))).collect();
        assert!(split_pairs(&one, Direction::UpperToLower, 0.8, 0).is_err());
        assert!(split_pairs(&[], Direction::UpperToLower, 0.8, 0).is_err());
        let two = vec![pair("a", "x"), pair("b", "y")];
        assert!(split_pairs(&two, Direction::UpperToLower, 1.0, 0).is_err());
        assert!(split_pairs(&two, Direction::UpperToLower, 0.5, 0).is_ok());
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("upper-to-lower".parse::<Direction>().unwrap(), Direction::UpperToLower);
        assert_eq!("LowerToUpper".parse::<Direction>().unwrap(), Direction::LowerToUpper);
        assert!("sideways".parse::<Direction>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn disjoint_and_deterministic(counts in prop::collection::vec(1usize..5, 5..40), seed in any::<u64>()) {
            let mut pairs = Vec::new();
            for (u, &c) in counts.iter().enumerate() {
                for k in 0..c {
                    pairs.push(pair(&format!("u{u}"), &format!("l{}", (u * 7 + k) % 13)));
                }
            }
            let m = split_pairs(&pairs, Direction::UpperToLower, 0.8, seed).unwrap();
            prop_assert!(disjoint_by_scan(&m, &pairs));
            prop_assert_eq!(m.train_pairs.len() + m.test_pairs.len(), pairs.len());
            let target = (pairs.len() as f64 * 0.2).round() as usize;
            prop_assert!(m.test_pairs.len() <= target);
            prop_assert_eq!(m, split_pairs(&pairs, Direction::UpperToLower, 0.8, seed).unwrap());
        }
    }
}
