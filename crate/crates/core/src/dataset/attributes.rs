use serde::{Deserialize, Serialize};

use crate::image::Domain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteFamily {
    Red,
    Yellow,
    Green,
    Blue,
}

pub const FAMILIES: [PaletteFamily; 4] = [PaletteFamily::Red, PaletteFamily::Yellow, PaletteFamily::Green, PaletteFamily::Blue];

impl PaletteFamily {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Reference colour in `[0, 1]` RGB.
    pub fn base_rgb(self) -> [f64; 3] {
        match self {
            PaletteFamily::Red => [0.80, 0.12, 0.15],
            PaletteFamily::Yellow => [0.92, 0.75, 0.10],
            PaletteFamily::Green => [0.10, 0.55, 0.20],
            PaletteFamily::Blue => [0.12, 0.22, 0.75],
        }
    }

    /// Hue of the reference colour, in degrees.
    pub fn hue(self) -> f64 {
        rgb_hue(self.base_rgb())
    }
}

/// HSV hue in degrees `[0, 360)` and saturation `[0, 1]`.
pub fn rgb_hue_sat(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 1e-12 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s)
}

pub fn rgb_hue(rgb: [f64; 3]) -> f64 {
    rgb_hue_sat(rgb).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
}

impl Pattern {
    pub fn is_patterned(self) -> bool {
        self != Pattern::Solid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Shirt,
    Sweater,
    Skirt,
    Trousers,
    Shorts,
}

impl Template {
    pub fn domain(self) -> Domain {
        match self {
            Template::Shirt | Template::Sweater => Domain::Upper,
            Template::Skirt | Template::Trousers | Template::Shorts => Domain::Lower,
        }
    }

    pub fn for_domain(domain: Domain) -> &'static [Template] {
        match domain {
            Domain::Upper => &[Template::Shirt, Template::Sweater],
            Domain::Lower => &[Template::Skirt, Template::Trousers, Template::Shorts],
        }
    }

    /// Dense class index over all templates.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentAttributes {
    pub template: Template,
    pub family: PaletteFamily,
    pub pattern: Pattern,
    /// Entity-specific main colour in `[0, 1]` RGB.
    pub shade: [f64; 3],
}

/// Ground-truth outfit rule: palette families must be compatible and, when
/// enabled, two patterned garments clash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibilityRule {
    #[serde(default = "default_true")]
    pub forbid_pattern_clash: bool,
    /// `(upper family, lower family)` combinations allowed besides same-family.
    #[serde(default)]
    pub extra_family_pairs: Vec<(PaletteFamily, PaletteFamily)>,
}

fn default_true() -> bool {
    true
}

impl Default for CompatibilityRule {
    fn default() -> Self {
        Self::standard()
    }
}

impl CompatibilityRule {
    pub fn standard() -> Self {
        Self { forbid_pattern_clash: true, extra_family_pairs: Vec::new() }
    }

    pub fn palette_match(&self, upper: PaletteFamily, lower: PaletteFamily) -> bool {
        upper == lower || self.extra_family_pairs.contains(&(upper, lower))
    }

    pub fn pattern_clash(&self, upper: Pattern, lower: Pattern) -> bool {
        self.forbid_pattern_clash && upper.is_patterned() && lower.is_patterned()
    }

    pub fn is_compatible(&self, upper: &GarmentAttributes, lower: &GarmentAttributes) -> bool {
        self.palette_match(upper.family, lower.family) && !self.pattern_clash(upper.pattern, lower.pattern)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_hues_are_well_separated() {
        let hues: Vec<f64> = FAMILIES.iter().map(|f| f.hue()).collect();
        for i in 0..hues.len() {
            for j in i + 1..hues.len() {
                let d = (hues[i] - hues[j]).abs();
                let d = d.min(360.0 - d);
                assert!(d > 40.0, "{:?} vs {:?}: {d}", FAMILIES[i], FAMILIES[j]);
            }
        }
    }

    #[test]
    fn rule_semantics() {
        let rule = CompatibilityRule::standard();
        let a = GarmentAttributes { template: Template::Shirt, family: PaletteFamily::Red, pattern: Pattern::Stripes, shade: [0.8, 0.1, 0.1] };
        let mut b = GarmentAttributes { template: Template::Skirt, family: PaletteFamily::Red, pattern: Pattern::Solid, shade: [0.8, 0.1, 0.1] };
        assert!(rule.is_compatible(&a, &b));
        b.pattern = Pattern::Dots;
        assert!(!rule.is_compatible(&a, &b));
        b.pattern = Pattern::Solid;
        b.family = PaletteFamily::Blue;
        assert!(!rule.is_compatible(&a, &b));
        let loose = CompatibilityRule { extra_family_pairs: vec![(PaletteFamily::Red, PaletteFamily::Blue)], ..CompatibilityRule::standard() };
        assert!(loose.is_compatible(&a, &b));
    }
}
