//! Flat key-value run configuration.

use std::path::Path;

use recipcrystal_model::diffusion::DiffuserConfig;
use recipcrystal_model::vae::{TrainConfig, VaeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Every key is optional; unset keys take the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `toy` (default) or `desk`.
    pub preset: Option<String>,

    pub n_heads: Option<usize>,
    pub d_head: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_aux: Option<usize>,
    pub jmax: Option<u32>,
    pub d_enc: Option<usize>,
    pub lambda_z: Option<f64>,
    pub lambda_mu: Option<f64>,
    pub cyclic_slots: Option<bool>,
    pub modulus_gating: Option<bool>,
    pub init_log_sigma: Option<f64>,
    pub target_nnz: Option<usize>,

    pub batch_size: Option<usize>,
    pub lr_peak: Option<f64>,
    pub lr_min: Option<f64>,
    pub weight_decay: Option<f64>,
    /// Warmup length as a fraction of the run.
    pub warmup_fraction: Option<f64>,
    pub vae_steps: Option<usize>,
    pub diffusion_steps: Option<usize>,

    pub diffusion_layers: Option<usize>,
    pub scratch_tokens: Option<usize>,
    pub precondition: Option<bool>,
}

/// Everything a training or sampling run needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub vae: VaeConfig,
    pub vae_train: TrainConfig,
    pub diffuser: DiffuserConfig,
    pub diffusion_train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut vae = match self.preset.as_deref().unwrap_or("toy") {
            "toy" => VaeConfig::toy(),
            "desk" => VaeConfig::desk(),
            other => return Err(CliError::Config(format!("unknown preset {other:?}"))),
        };
        macro_rules! set {
            ($dst:expr, $($key:ident),*) => { $( if let Some(v) = self.$key { $dst.$key = v; } )* };
        }
        set!(vae, n_heads, d_head, n_layers, n_aux, jmax, d_enc, lambda_z, lambda_mu, cyclic_slots, modulus_gating, init_log_sigma);
        vae.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let train = |steps: usize| -> Result<TrainConfig> {
            let mut t = TrainConfig::toy(steps);
            set!(t, batch_size, lr_peak, lr_min, weight_decay);
            if let Some(f) = self.warmup_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return Err(CliError::Config("warmup_fraction must lie in [0, 1]".into()));
                }
                t.warmup_steps = (f * steps as f64).round() as usize;
            }
            t.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Ok(t)
        };
        let mut vae_train = train(self.vae_steps.unwrap_or(200))?;
        vae_train.target_nnz = self.target_nnz;
        let full = vae.ladder_rows() * vae.d_model();
        if self.target_nnz.is_some_and(|t| t == 0 || t > full) {
            return Err(CliError::Config(format!("target_nnz must lie in 1..={full}")));
        }
        let diffusion_train = train(self.diffusion_steps.unwrap_or(500))?;

        let mut diffuser = DiffuserConfig::toy();
        if let Some(n) = self.diffusion_layers {
            diffuser.n_layers = n;
        }
        if self.scratch_tokens.is_some() {
            diffuser.n_scratch = self.scratch_tokens;
        }
        if let Some(p) = self.precondition {
            diffuser.precondition = p;
        }
        Ok(Resolved { vae, vae_train, diffuser, diffusion_train })
    }
}

impl Resolved {
    pub fn vae_hash(&self) -> String {
        digest(&(&self.vae, &self.vae_train))
    }

    /// Covers the autoencoder part too, so a diffuser is tied to its encoder.
    pub fn diffusion_hash(&self) -> String {
        digest(&(self.vae_hash(), &self.diffuser, &self.diffusion_train))
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
