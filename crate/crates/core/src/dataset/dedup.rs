use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::perceptual::{embedded_distance, PerceptualExtractor};

/// Default merge cut-off on the perceptual distance.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.01;

/// Partition of an image list into entities.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityMap {
    /// Entity id assigned to each input image, in input order.
    pub ids: Vec<String>,
}

impl EntityMap {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Entity id → member indices.
    pub fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, id) in self.ids.iter().enumerate() {
            out.entry(id.as_str()).or_default().push(i);
        }
        out
    }

    pub fn entity_count(&self) -> usize {
        self.groups().len()
    }

    /// Rewrites `entity_id` on each image.
    pub fn apply(&self, images: &mut [Image]) {
        for (img, id) in images.iter_mut().zip(&self.ids) {
            img.entity_id = id.clone();
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smallest index stays root so the canonical id is the earliest member's.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Merges images whose perceptual distance falls below `threshold`, transitively.
/// Each entity takes the id of its first member in input order.
pub fn merge_duplicate_entities(images: &[Image], threshold: f64, extractor: &PerceptualExtractor) -> Result<EntityMap> {
    if images.is_empty() {
        return Ok(EntityMap::default());
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidArgument(format!("dedup threshold must be positive, got {threshold}")));
    }
    let domain = images[0].domain;
    if let Some(bad) = images.iter().find(|i| i.domain != domain) {
        return Err(Error::DomainMismatch { expected: domain, actual: bad.domain });
    }
    let refs: Vec<&Image> = images.iter().collect();
    let emb = extractor.embed(&refs)?;
    let mut uf = UnionFind::new(images.len());
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            if embedded_distance(&emb[i], &emb[j]) < threshold {
                uf.union(i, j);
            }
        }
    }
    let ids = (0..images.len()).map(|i| images[uf.find(i)].entity_id.clone()).collect();
    Ok(EntityMap { ids })
}
