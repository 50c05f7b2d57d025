//! Two-stage training: unconditional pre-training of the target-domain
//! generator, then the three-step adversarial loop that trains the encoder.

mod bcgan;
mod pretrain;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::optim::Adam;
use crate::rng::{RngState, SeededRng};

pub use bcgan::{
    generator_objective, BcganTrainer, Critics, GeneratorBatch, GeneratorTerms, StepCounters, StepKind, TrainConfig, TrainingData,
};
pub use pretrain::{bundle_from_checkpoint, pretrain_target_gan, PretrainConfig, PretrainRecord, Pretrainer};

/// Switches that remove one component of the full objective each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    #[serde(default)]
    pub disable_div: bool,
    #[serde(default)]
    pub disable_dcmp: bool,
    /// Critic sees only real-compatible and fake pairs.
    #[serde(default)]
    pub disable_contrastive: bool,
    /// Image-space real/fake discriminator in place of the embedding discriminator.
    #[serde(default)]
    pub use_pixel_discriminator: bool,
}

impl Ablations {
    /// Parses a CLI name such as `no-div`.
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "no-div" | "disable-div" => self.disable_div = true,
            "no-dcmp" | "disable-dcmp" => self.disable_dcmp = true,
            "no-contrastive" | "disable-contrastive" => self.disable_contrastive = true,
            "pixel" | "dpix" | "use-pixel-discriminator" => self.use_pixel_discriminator = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

/// One line of a training log. `total = adv + lambda1·div + lambda2·cmp` holds
/// with the effective (post-ablation) weights recorded on the same line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub dis: f64,
    pub cmp_dis: f64,
    pub adv: f64,
    pub div: f64,
    pub cmp: f64,
    pub total: f64,
    pub gp: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub grad_norms: BTreeMap<String, f64>,
    pub ms: f64,
}

/// Appends one JSON record per line.
pub fn append_jsonl<T: Serialize>(out: &mut impl Write, record: &T) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(out, "{line}").map_err(|e| Error::io("<log>", e))
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(bytes))
}

/// Aborts on non-finite or runaway losses.
pub(crate) fn guard(iteration: u64, name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() || value.abs() > 1e6 {
        return Err(Error::Divergence { iteration, message: format!("{name} loss is {value}") });
    }
    Ok(value)
}

pub(crate) fn push_params(arrays: &mut Vec<(String, Vec<f64>)>, name: &str, p: &Params) {
    arrays.push((name.to_string(), p.flatten()));
}

pub(crate) fn push_adam(arrays: &mut Vec<(String, Vec<f64>)>, meta: &mut serde_json::Map<String, serde_json::Value>, name: &str, a: &Adam) {
    arrays.push((format!("adam.{name}.m"), a.m.clone()));
    arrays.push((format!("adam.{name}.v"), a.v.clone()));
    meta.insert(format!("adam.{name}.step"), a.step.into());
    meta.insert(format!("adam.{name}.config"), serde_json::to_value(a.config).expect("serialisable"));
}

pub(crate) fn load_params(ck: &Checkpoint, name: &str, p: &mut Params) -> Result<()> {
    p.load_flat(ck.array(name)?).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))
}

pub(crate) fn load_adam(ck: &Checkpoint, name: &str, params: &Params) -> Result<Adam> {
    let mut a = Adam::new(ck.meta_field(&format!("adam.{name}.config"))?, params);
    a.step = ck.meta_field(&format!("adam.{name}.step"))?;
    let (m, v) = (ck.array(&format!("adam.{name}.m"))?, ck.array(&format!("adam.{name}.v"))?);
    if m.len() != a.m.len() || v.len() != a.v.len() {
        return Err(Error::CorruptCheckpoint(format!("optimizer state {name} has the wrong size")));
    }
    a.m = m.to_vec();
    a.v = v.to_vec();
    Ok(a)
}

pub(crate) fn rng_to_meta(rng: &SeededRng) -> serde_json::Value {
    hex::encode(RngState::capture(rng).to_bytes()).into()
}

pub(crate) fn rng_from_meta(ck: &Checkpoint, key: &str) -> Result<SeededRng> {
    let text: String = ck.meta_field(key)?;
    let bytes = hex::decode(text).map_err(|e| Error::CorruptCheckpoint(format!("{key}: {e}")))?;
    let state = RngState::from_bytes(&bytes).ok_or_else(|| Error::CorruptCheckpoint(format!("{key}: bad length")))?;
    Ok(state.restore())
}
