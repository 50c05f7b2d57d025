//! On-disk layout:
//!
//! ```text
//! root/upper/<entity>_<k>.png
//! root/lower/<entity>_<k>.png
//! root/pairs.csv          upper_id,lower_id
//! root/attributes.json    resolution, rule, per-entity attributes
//! root/split.json         SplitManifest
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attributes::{CompatibilityRule, GarmentAttributes};
use super::split::SplitManifest;
use super::{Garment, OutfitDataset, OutfitPair};
use crate::error::{Error, Result};
use crate::image::{Domain, Image};

pub const PAIRS_FILE: &str = "pairs.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Serialize, Deserialize)]
struct AttributeSidecar {
    resolution: usize,
    rule: Option<CompatibilityRule>,
    upper: BTreeMap<String, GarmentAttributes>,
    lower: BTreeMap<String, GarmentAttributes>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_dataset(ds: &OutfitDataset, root: &Path) -> Result<()> {
    let mut sidecar = AttributeSidecar { resolution: ds.resolution, rule: ds.rule.clone(), upper: BTreeMap::new(), lower: BTreeMap::new() };
    for domain in [Domain::Upper, Domain::Lower] {
        let dir = root.join(domain.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for g in ds.garments(domain) {
            for (k, view) in g.views.iter().enumerate() {
                view.save_png(&dir.join(format!("{}_{k}.png", g.id)))?;
            }
            if let Some(a) = g.attributes {
                let map = if domain == Domain::Upper { &mut sidecar.upper } else { &mut sidecar.lower };
                map.insert(g.id.clone(), a);
            }
        }
    }
    let path = root.join(PAIRS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["upper_id", "lower_id"]).map_err(|e| csv_error(&path, e))?;
    for p in &ds.pairs {
        w.write_record([&p.upper, &p.lower]).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&root.join(ATTRIBUTES_FILE), &sidecar)
}

/// Splits `<entity>_<k>.png` into `(entity, k)`.
fn parse_view_name(path: &Path) -> Option<(String, usize)> {
    if path.extension()?.to_str()? != "png" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let (id, k) = stem.rsplit_once('_')?;
    Some((id.to_string(), k.parse().ok()?))
}

fn load_domain(root: &Path, domain: Domain, resolution: usize, attrs: &BTreeMap<String, GarmentAttributes>) -> Result<Vec<Garment>> {
    let dir = root.join(domain.dir_name());
    let mut views: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if let Some((id, k)) = parse_view_name(&path) {
            views.entry(id).or_default().insert(k, path);
        }
    }
    views
        .into_iter()
        .map(|(id, files)| {
            let views = files
                .values()
                .map(|p| Image::load_png(p, resolution, domain, id.clone()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Garment { attributes: attrs.get(&id).copied(), id, views })
        })
        .collect()
}

fn read_pairs(path: &Path) -> Result<Vec<OutfitPair>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut pairs = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 2 {
            return Err(Error::Manifest(vec![format!("row {}: expected 2 fields, got {}", row + 1, rec.len())]));
        }
        pairs.push(OutfitPair { upper: rec[0].to_string(), lower: rec[1].to_string(), compatible: true });
    }
    Ok(pairs)
}

/// Loads a directory written by [`write_dataset`]. Without an attribute sidecar,
/// `resolution` decides the working size.
pub fn load_dataset(root: &Path, resolution: Option<usize>) -> Result<OutfitDataset> {
    let side_path = root.join(ATTRIBUTES_FILE);
    let sidecar: Option<AttributeSidecar> = if side_path.exists() { Some(read_json(&side_path)?) } else { None };
    let resolution = match (&sidecar, resolution) {
        (_, Some(r)) => r,
        (Some(s), None) => s.resolution,
        (None, None) => return Err(Error::Config(format!("{} has no {ATTRIBUTES_FILE}; a resolution is required", root.display()))),
    };
    let empty = BTreeMap::new();
    let (ua, la) = sidecar.as_ref().map_or((&empty, &empty), |s| (&s.upper, &s.lower));
    let uppers = load_domain(root, Domain::Upper, resolution, ua)?;
    let lowers = load_domain(root, Domain::Lower, resolution, la)?;
    let mut pairs = read_pairs(&root.join(PAIRS_FILE))?;
    let mut problems = Vec::new();
    let uid: std::collections::HashSet<&str> = uppers.iter().map(|g| g.id.as_str()).collect();
    let lid: std::collections::HashSet<&str> = lowers.iter().map(|g| g.id.as_str()).collect();
    for (row, p) in pairs.iter().enumerate() {
        if !uid.contains(p.upper.as_str()) {
            problems.push(format!("row {}: unknown upper entity {:?}", row + 1, p.upper));
        }
        if !lid.contains(p.lower.as_str()) {
            problems.push(format!("row {}: unknown lower entity {:?}", row + 1, p.lower));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    let rule = sidecar.and_then(|s| s.rule);
    if let Some(rule) = &rule {
        let (ui, li) = (index_attrs(&uppers), index_attrs(&lowers));
        for p in &mut pairs {
            if let (Some(a), Some(b)) = (ui.get(p.upper.as_str()), li.get(p.lower.as_str())) {
                p.compatible = rule.is_compatible(a, b);
            }
        }
    }
    Ok(OutfitDataset { resolution, uppers, lowers, pairs, rule })
}

fn index_attrs(gs: &[Garment]) -> BTreeMap<&str, GarmentAttributes> {
    gs.iter().filter_map(|g| Some((g.id.as_str(), g.attributes?))).collect()
}

pub fn write_split(manifest: &SplitManifest, root: &Path) -> Result<()> {
    write_json(&root.join(SPLIT_FILE), manifest)
}

pub fn read_split(root: &Path) -> Result<SplitManifest> {
    read_json(&root.join(SPLIT_FILE))
}

/// Reads a manifest of `upper_path,lower_path` rows (paths relative to `root`,
/// header required) and builds a dataset whose entities are the image file stems.
/// Every bad row is reported before failing.
pub fn ingest_real_dataset(root: &Path, manifest: &Path, resolution: usize) -> Result<OutfitDataset> {
    let empty = OutfitDataset { resolution, uppers: Vec::new(), lowers: Vec::new(), pairs: Vec::new(), rule: None };
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    if text.trim().is_empty() {
        return Ok(empty);
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let mut problems = Vec::new();
    let mut uppers: BTreeMap<String, Garment> = BTreeMap::new();
    let mut lowers: BTreeMap<String, Garment> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {row}: {e}"));
                continue;
            }
        };
        if rec.len() != 2 || rec.iter().any(|f| f.trim().is_empty()) {
            problems.push(format!("row {row}: expected `upper_path,lower_path`, got {} field(s)", rec.len()));
            continue;
        }
        let mut ids = Vec::with_capacity(2);
        for (field, domain) in rec.iter().zip([Domain::Upper, Domain::Lower]) {
            let path = root.join(field.trim());
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let store = if domain == Domain::Upper { &mut uppers } else { &mut lowers };
            if !store.contains_key(&id) {
                if !path.is_file() {
                    problems.push(format!("row {row}: missing file {}", path.display()));
                    continue;
                }
                match Image::load_png(&path, resolution, domain, id.clone()) {
                    Ok(img) => {
                        store.insert(id.clone(), Garment { id: id.clone(), views: vec![img], attributes: None });
                    }
                    Err(e) => {
                        problems.push(format!("row {row}: {e}"));
                        continue;
                    }
                }
            }
            ids.push(id);
        }
        if ids.len() == 2 {
            pairs.push(OutfitPair { upper: ids[0].clone(), lower: ids[1].clone(), compatible: true });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    Ok(OutfitDataset { uppers: uppers.into_values().collect(), lowers: lowers.into_values().collect(), pairs, ..empty })
}
