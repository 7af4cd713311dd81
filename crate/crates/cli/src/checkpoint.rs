//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! reloaded checkpoint continues training bit-for-bit.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use recipcrystal_model::diffusion::{DiffuserConfig, Diffuser, LatentSpace, NoiseScales};
use recipcrystal_model::optim::Adam;
use recipcrystal_model::vae::{TrainConfig, Vae, VaeConfig};
use recipcrystal_model::ParamStore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read_json, write_json, SCHEMA_VERSION};

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it can exceed 2⁶⁴.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| CliError::CheckpointMismatch(format!("unreadable rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeCheckpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: VaeConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub params: ParamStore,
    pub selector: Vec<bool>,
    pub adam: Adam,
    pub rng: RngState,
}

impl VaeCheckpoint {
    pub fn vae(&self) -> Result<Vae> {
        Vae::from_parts(self.config.clone(), self.params.clone(), self.selector.clone())
            .map_err(|e| CliError::CheckpointMismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCheckpoint {
    pub schema_version: u32,
    pub config_hash: String,
    /// Fingerprint of the autoencoder weights this diffuser was trained on.
    pub vae_fingerprint: String,
    pub config: DiffuserConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub scales: NoiseScales,
    pub params: ParamStore,
    pub adam: Adam,
    pub rng: RngState,
}

impl DiffusionCheckpoint {
    pub fn diffuser(&self, vae: &Vae) -> Result<Diffuser> {
        let space = LatentSpace::new(vae, self.scales.clone())
            .map_err(|e| CliError::CheckpointMismatch(e.to_string()))?;
        Diffuser::from_parts(self.config.clone(), vae, space, self.params.clone())
            .map_err(|e| CliError::CheckpointMismatch(e.to_string()))
    }
}

pub fn save<T: Serialize>(path: &Path, ckpt: &T) -> Result<()> {
    write_json(path, ckpt)
}

/// Loads a checkpoint, rejecting other schema versions and other kinds.
pub fn load<T: DeserializeOwned + HasSchema>(path: &Path) -> Result<T> {
    let ckpt: T = read_json(path).map_err(|e| match e {
        CliError::Parse { path, msg, .. } => CliError::CheckpointMismatch(format!("{path}: {msg}")),
        other => other,
    })?;
    if ckpt.schema_version() != SCHEMA_VERSION {
        return Err(CliError::CheckpointMismatch(format!(
            "{}: schema_version {}",
            path.display(),
            ckpt.schema_version()
        )));
    }
    Ok(ckpt)
}

pub trait HasSchema {
    fn schema_version(&self) -> u32;
}

impl HasSchema for VaeCheckpoint {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl HasSchema for DiffusionCheckpoint {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}
