//! Run directories: locking, digest stamping, and shared loading steps.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bcgan::checkpoint::{Checkpoint, Stage};
use bcgan::dataset::{load_dataset, read_split, OutfitDataset, SplitManifest};
use bcgan::image::{Domain, Image};
use bcgan::metrics::{CompatibilityOracle, FeatureEvaluator};
use bcgan::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const ROOT_ENV: &str = "BCGAN_RUN_ROOT";
const LOCK_FILE: &str = ".lock";
const DATA_STAMP: &str = "data_digest.txt";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!("run directory {} is in use (remove {} if no other bcgan process is running)", dir.display(), path.display())
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    _lock: RunLock,
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let root = std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let dir = root.join(&cfg.run_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(dir.join("config.toml"), e))?;
        Ok(Self { cfg, dir, _lock: lock })
    }

    pub fn subdir(&self, parts: &[&str]) -> Result<PathBuf> {
        let mut p = self.dir.clone();
        for part in parts {
            p.push(part);
        }
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir.join("dataset")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.dir.join("pretrain")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dir.join("train").join(self.cfg.variant())
    }

    pub fn stamp_dataset(&self) -> Result<()> {
        let p = self.dataset_dir().join(DATA_STAMP);
        fs::write(&p, self.cfg.data_digest()).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    /// Dataset and split, refused when built under different data settings.
    pub fn load_data(&self) -> Result<(OutfitDataset, SplitManifest)> {
        let dir = self.dataset_dir();
        let stamp_path = dir.join(DATA_STAMP);
        let stamp = fs::read_to_string(&stamp_path)
            .map_err(|e| Error::io(&stamp_path, e))
            .with_context(|| format!("no dataset in {}; run `bcgan dataset` first", dir.display()))?;
        let expected = self.cfg.data_digest();
        if stamp.trim() != expected {
            return Err(Error::DigestMismatch { found: stamp.trim().to_string(), expected }.into());
        }
        let ds = load_dataset(&dir, Some(self.cfg.resolution))?;
        let split = read_split(&dir)?;
        Ok((ds, split))
    }

    pub fn oracle(&self, ds: &OutfitDataset) -> CompatibilityOracle {
        CompatibilityOracle::new(ds.rule.clone().unwrap_or_default(), ds.attribute_store())
    }

    /// Feature evaluator for FID, trained once per dataset and evaluator settings.
    pub fn evaluator(&self, ds: &OutfitDataset) -> Result<FeatureEvaluator> {
        let path = self.dir.join("evaluator.json");
        let key_path = self.dir.join("evaluator.key");
        let key = crate::config::digest_value(&json!({ "data": self.cfg.data_digest(), "evaluator": self.cfg.evaluator_config() }));
        if let (Ok(text), Ok(stored)) = (fs::read_to_string(&path), fs::read_to_string(&key_path)) {
            if stored.trim() == key {
                return Ok(FeatureEvaluator::from_json(&text)?);
            }
        }
        log::info!("training the feature evaluator");
        let ev = FeatureEvaluator::train_on(ds, self.cfg.evaluator_config())?;
        fs::write(&path, ev.to_json()?).map_err(|e| Error::io(&path, e))?;
        fs::write(&key_path, key).map_err(|e| Error::io(&key_path, e))?;
        Ok(ev)
    }

    /// Writes `manifest.json` next to produced files, recording the run digest.
    pub fn sidecar(&self, dir: &Path, files: &[PathBuf], extra: serde_json::Value) -> Result<()> {
        let names: Vec<String> =
            files.iter().map(|f| f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/")).collect();
        let doc = json!({
            "config_digest": self.cfg.digest(),
            "data_digest": self.cfg.data_digest(),
            "files": names,
            "details": extra,
        });
        write_json(&dir.join("manifest.json"), &doc)
    }

    /// Checkpoint stamped with the run and data digests.
    pub fn save_checkpoint(&self, mut ck: Checkpoint, dir: &Path, snapshot: bool) -> Result<()> {
        if let Some(meta) = ck.meta.as_object_mut() {
            meta.insert("run_digest".into(), self.cfg.digest().into());
            meta.insert("data_digest".into(), self.cfg.data_digest().into());
        }
        ck.save(&dir.join("checkpoint.bin"))?;
        if snapshot {
            ck.save(&dir.join(format!("checkpoint-{:06}.bin", ck.iteration)))?;
        }
        Ok(())
    }

    /// Loads a checkpoint of `stage` built from this run's dataset.
    pub fn load_checkpoint(&self, path: &Path, stage: Stage) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ck.stage != stage {
            return Err(Error::CorruptCheckpoint(format!("{} is a {:?} checkpoint, expected {:?}", path.display(), ck.stage, stage)).into());
        }
        let found: String = ck.meta_field("data_digest")?;
        let expected = self.cfg.data_digest();
        if found != expected {
            return Err(Error::DigestMismatch { found, expected }.into());
        }
        Ok(ck)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn create(path: &Path) -> Result<File> {
    Ok(File::create(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a PNG or every PNG in a directory (sorted by name). An image stored
/// under an `upper/` or `lower/` directory is taken to belong to that domain.
pub fn read_inputs(path: &Path, resolution: usize, expected: Domain) -> Result<Vec<Image>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images under {}", path.display())).into());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let domain = domain_of(&f).unwrap_or(expected);
        if domain != expected {
            return Err(Error::DomainMismatch { expected, actual: domain }.into());
        }
        let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("two inputs share the name {id}")).into());
        }
        out.push(Image::load_png(&f, resolution, domain, id)?);
    }
    Ok(out)
}

fn domain_of(file: &Path) -> Option<Domain> {
    let parent = file.parent()?.file_name()?.to_str()?;
    [Domain::Upper, Domain::Lower].into_iter().find(|d| d.dir_name() == parent)
}
