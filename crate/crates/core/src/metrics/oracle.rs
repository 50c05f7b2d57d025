//! Rule-based compatibility score over garment attributes.
//!
//! Real garments carry their generated attributes. Synthesised images do not,
//! so a [`PixelAttributeReader`] estimates soft attributes straight from the
//! pixels: family from the saturation-weighted hue of the foreground, pattern
//! from the spread of foreground colours.

use sha2::{Digest, Sha256};

use crate::dataset::{rgb_hue_sat, AttributeStore, CompatibilityRule, GarmentAttributes, PaletteFamily, FAMILIES};
use crate::error::{Error, Result};
use crate::image::{denormalize, Domain, Image};

/// Upper bound of the hash tiebreaker added to every score.
pub const TIEBREAK_SCALE: f64 = 1e-6;
/// Scores above this count as compatible: halfway between a clean match (2)
/// and a palette match with a pattern clash (1).
pub const COMPATIBLE_THRESHOLD: f64 = 1.5;

/// Attribute beliefs: a distribution over palette families and the
/// probability that the garment is patterned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftAttributes {
    pub family: [f64; 4],
    pub patterned: f64,
}

impl From<&GarmentAttributes> for SoftAttributes {
    fn from(a: &GarmentAttributes) -> Self {
        let mut family = [0.0; 4];
        family[a.family.index()] = 1.0;
        Self { family, patterned: if a.pattern.is_patterned() { 1.0 } else { 0.0 } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelAttributeReader {
    /// Pixels whose darkest channel (in `[0, 1]`) exceeds this are background.
    pub background_level: f64,
    /// Width of the hue kernel around each family hue, degrees.
    pub hue_sigma: f64,
    /// Saturation at which the family estimate is fully trusted.
    pub saturation_knee: f64,
    /// Mean foreground channel spread at which pattern odds are even.
    pub pattern_midpoint: f64,
    pub pattern_softness: f64,
}

impl Default for PixelAttributeReader {
    fn default() -> Self {
        Self { background_level: 0.92, hue_sigma: 12.0, saturation_knee: 0.25, pattern_midpoint: 0.05, pattern_softness: 0.012 }
    }
}

fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

impl PixelAttributeReader {
    pub fn read(&self, img: &Image) -> SoftAttributes {
        let s = img.size();
        let plane = s * s;
        let px = img.pixels();
        let mut fg = Vec::new();
        for i in 0..plane {
            let rgb = [0, 1, 2].map(|c| (px[c * plane + i] + 1.0) * 0.5);
            if rgb.iter().cloned().fold(f64::INFINITY, f64::min) < self.background_level {
                fg.push(rgb);
            }
        }
        let uniform = SoftAttributes { family: [0.25; 4], patterned: 0.5 };
        if fg.len() < 2 {
            return uniform;
        }
        let n = fg.len() as f64;
        let mut mean = [0.0; 3];
        for p in &fg {
            for c in 0..3 {
                mean[c] += p[c] / n;
            }
        }
        let spread = (0..3)
            .map(|c| (fg.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
            .sum::<f64>()
            / 3.0;
        let patterned = 1.0 / (1.0 + (-(spread - self.pattern_midpoint) / self.pattern_softness).exp());

        let (hue, sat) = rgb_hue_sat(mean);
        let mut family = FAMILIES.map(|f| (-0.5 * (hue_gap(hue, f.hue()) / self.hue_sigma).powi(2)).exp());
        let total: f64 = family.iter().sum();
        let trust = (sat / self.saturation_knee).min(1.0);
        for v in &mut family {
            let p = if total > 1e-300 { *v / total } else { 0.25 };
            *v = trust * p + (1.0 - trust) * 0.25;
        }
        SoftAttributes { family, patterned }
    }

    /// Most likely family (ties go to the lower index).
    pub fn family(&self, img: &Image) -> PaletteFamily {
        let f = self.read(img).family;
        let best = (0..4).fold(0, |b, i| if f[i] > f[b] { i } else { b });
        FAMILIES[best]
    }
}

/// `2·P(palette match) − P(pattern clash)` between an upper and a lower.
pub fn rule_score(rule: &CompatibilityRule, upper: &SoftAttributes, lower: &SoftAttributes) -> f64 {
    let mut palette = 0.0;
    for (i, fu) in FAMILIES.iter().enumerate() {
        for (j, fl) in FAMILIES.iter().enumerate() {
            if rule.palette_match(*fu, *fl) {
                palette += upper.family[i] * lower.family[j];
            }
        }
    }
    let clash = if rule.forbid_pattern_clash { upper.patterned * lower.patterned } else { 0.0 };
    2.0 * palette - clash
}

/// Deterministic value in `[0, TIEBREAK_SCALE)` from the given item's id and
/// the candidate's quantised pixels.
pub fn tiebreak(x: &Image, y: &Image) -> f64 {
    let mut h = Sha256::new();
    h.update(x.entity_id.as_bytes());
    h.update([0]);
    h.update(y.pixels().iter().map(|&v| denormalize(v)).collect::<Vec<u8>>());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64 * TIEBREAK_SCALE
}

/// Compatibility predictor: stored attributes first, pixel reading as the surrogate.
#[derive(Clone, Debug)]
pub struct CompatibilityOracle {
    pub rule: CompatibilityRule,
    pub store: AttributeStore,
    pub surrogate: Option<PixelAttributeReader>,
}

impl CompatibilityOracle {
    pub fn new(rule: CompatibilityRule, store: AttributeStore) -> Self {
        Self { rule, store, surrogate: Some(PixelAttributeReader::default()) }
    }

    pub fn without_surrogate(rule: CompatibilityRule, store: AttributeStore) -> Self {
        Self { rule, store, surrogate: None }
    }

    pub fn attributes(&self, img: &Image) -> Result<SoftAttributes> {
        if let Some(a) = self.store.get(img.domain, &img.entity_id) {
            return Ok(a.into());
        }
        match &self.surrogate {
            Some(reader) => Ok(reader.read(img)),
            None => Err(Error::MissingAttributes(format!("{} {:?}", img.domain.dir_name(), img.entity_id))),
        }
    }

    /// φ(x, y) for a given item and a candidate from the other domain.
    pub fn phi(&self, x: &Image, y: &Image) -> Result<f64> {
        if x.domain == y.domain {
            return Err(Error::DomainMismatch { expected: x.domain.other(), actual: y.domain });
        }
        let (ax, ay) = (self.attributes(x)?, self.attributes(y)?);
        let (upper, lower) = if x.domain == Domain::Upper { (ax, ay) } else { (ay, ax) };
        Ok(rule_score(&self.rule, &upper, &lower) + tiebreak(x, y))
    }

    pub fn is_compatible(&self, x: &Image, y: &Image) -> Result<bool> {
        Ok(self.phi(x, y)? > COMPATIBLE_THRESHOLD)
    }

    /// Fraction of `(given, candidate)` pairs judged compatible.
    pub fn compatibility_rate(&self, pairs: &[(&Image, &Image)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("compatibility rate over no pairs".into()));
        }
        let mut hits = 0usize;
        for (x, y) in pairs {
            hits += usize::from(self.is_compatible(x, y)?);
        }
        Ok(hits as f64 / pairs.len() as f64)
    }
}

/// Free-function form of [`CompatibilityOracle::phi`].
pub fn oracle_phi(x: &Image, y: &Image, oracle: &CompatibilityOracle) -> Result<f64> {
    oracle.phi(x, y)
}
