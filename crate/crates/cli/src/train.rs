//! Training runs with streamed metrics and resumable checkpoints.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use recipcrystal_core::Crystal;
use recipcrystal_model::diffusion::{bin_means, encode_corpus, DiffusionRecord, DiffusionTrainer};
use recipcrystal_model::vae::{prepare, LossRecord, Vae, VaeTrainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load, save, DiffusionCheckpoint, RngState, VaeCheckpoint};
use crate::config::{Resolved, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::SCHEMA_VERSION;
use crate::screen::read_archive;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Vae {
        step: usize,
        total: f64,
        ce: f64,
        lat: f64,
        four: f64,
        mu: f64,
        lr: f64,
        active: usize,
    },
    Diffusion {
        step: usize,
        phi: f64,
        bin: usize,
        loss: f64,
        signal_rmse: f64,
        lr: f64,
    },
    /// Mean noise RMSE per `φ` bin over the steps run in this invocation.
    DiffusionBins { rmse: [Option<f64>; 5] },
}

impl From<&LossRecord> for Metric {
    fn from(r: &LossRecord) -> Self {
        let l = r.loss;
        Metric::Vae { step: r.step, total: l.total, ce: l.ce, lat: l.lat, four: l.four, mu: l.mu, lr: r.lr, active: r.active }
    }
}

impl From<&DiffusionRecord> for Metric {
    fn from(r: &DiffusionRecord) -> Self {
        Metric::Diffusion { step: r.step, phi: r.phi, bin: r.bin, loss: r.loss, signal_rmse: r.signal_rmse, lr: r.lr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainKind {
    Vae,
    Diffusion,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub kind: TrainKind,
    pub config: RunConfig,
    pub corpus: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    /// Metrics destination; stdout when absent.
    pub metrics: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Autoencoder checkpoint, required for diffusion.
    pub vae: Option<PathBuf>,
    /// Stop after this global step instead of the configured total.
    pub until: Option<usize>,
}

struct MetricSink(Box<dyn Write>);

impl MetricSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?)),
            None => Box::new(io::stdout()),
        }))
    }

    fn emit(&mut self, m: &Metric) -> Result<()> {
        let line = serde_json::to_string(m).expect("metric serializes");
        writeln!(self.0, "{line}").and_then(|_| self.0.flush()).map_err(|e| CliError::io("metrics", e))
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Crystal>> {
    read_archive(path)?
        .iter()
        .map(|r| {
            r.crystal.to_crystal().map_err(|e| CliError::ArchiveCorrupt {
                path: path.display().to_string(),
                msg: format!("record {}: {e}", r.id),
            })
        })
        .collect()
}

/// Identifies trained autoencoder weights, so a diffuser cannot be paired
/// with a different encoder of the same configuration.
pub fn vae_fingerprint(ckpt: &VaeCheckpoint) -> String {
    let bytes = serde_json::to_vec(&(&ckpt.config_hash, &ckpt.params, &ckpt.selector)).expect("params serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn check_hash(what: &str, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(CliError::CheckpointMismatch(format!(
            "{what} was written for config {found}, current config hashes to {expected}"
        )));
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<usize> {
    let resolved = args.config.resolve()?;
    match args.kind {
        TrainKind::Vae => train_vae(args, &resolved),
        TrainKind::Diffusion => train_diffusion(args, &resolved),
    }
}

fn train_vae(args: &TrainArgs, r: &Resolved) -> Result<usize> {
    let hash = r.vae_hash();
    let (mut tr, seed) = match &args.resume {
        Some(p) => {
            let ck: VaeCheckpoint = load(p)?;
            check_hash("checkpoint", &ck.config_hash, &hash)?;
            let tr = VaeTrainer { vae: ck.vae()?, tcfg: r.vae_train.clone(), adam: ck.adam, rng: ck.rng.restore()?, step: ck.step };
            (tr, ck.seed)
        }
        None => (VaeTrainer::new(r.vae.clone(), r.vae_train.clone(), args.seed)?, args.seed),
    };
    let data = prepare(&load_corpus(&args.corpus)?, &r.vae.wave_set())?;
    let mut sink = MetricSink::open(args.metrics.as_deref())?;
    let stop = args.until.unwrap_or(usize::MAX);
    while !tr.done() && tr.step < stop {
        let rec = tr.step(&data)?;
        sink.emit(&(&rec).into())?;
    }
    save(
        &args.out,
        &VaeCheckpoint {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            config: tr.vae.cfg.clone(),
            train: tr.tcfg.clone(),
            seed,
            step: tr.step,
            params: tr.vae.store.clone(),
            selector: tr.vae.selector.clone(),
            adam: tr.adam.clone(),
            rng: RngState::capture(&tr.rng),
        },
    )?;
    Ok(tr.step)
}

/// Loads an autoencoder checkpoint and checks it against the current config.
pub fn load_vae(path: Option<&Path>, r: &Resolved) -> Result<(VaeCheckpoint, Vae)> {
    let path = path.ok_or_else(|| {
        CliError::CheckpointMismatch("diffusion needs an autoencoder checkpoint (--vae)".into())
    })?;
    let ck: VaeCheckpoint = load(path)?;
    check_hash("autoencoder checkpoint", &ck.config_hash, &r.vae_hash())?;
    let vae = ck.vae()?;
    Ok((ck, vae))
}

fn train_diffusion(args: &TrainArgs, r: &Resolved) -> Result<usize> {
    let (vck, vae) = load_vae(args.vae.as_deref(), r)?;
    let fingerprint = vae_fingerprint(&vck);
    let hash = r.diffusion_hash();
    let data = prepare(&load_corpus(&args.corpus)?, &r.vae.wave_set())?;
    let (mut tr, seed) = match &args.resume {
        Some(p) => {
            let ck: DiffusionCheckpoint = load(p)?;
            check_hash("checkpoint", &ck.config_hash, &hash)?;
            if ck.vae_fingerprint != fingerprint {
                return Err(CliError::CheckpointMismatch("checkpoint belongs to a different autoencoder".into()));
            }
            let tr = DiffusionTrainer {
                diff: ck.diffuser(&vae)?,
                latents: encode_corpus(&vae, &data),
                tcfg: r.diffusion_train.clone(),
                adam: ck.adam,
                rng: ck.rng.restore()?,
                step: ck.step,
            };
            (tr, ck.seed)
        }
        None => {
            let tr = DiffusionTrainer::new(&vae, &data, r.diffuser.clone(), r.diffusion_train.clone(), args.seed)?;
            (tr, args.seed)
        }
    };
    let mut sink = MetricSink::open(args.metrics.as_deref())?;
    let stop = args.until.unwrap_or(usize::MAX);
    let mut trace = Vec::new();
    while !tr.done() && tr.step < stop {
        let rec = tr.step()?;
        sink.emit(&(&rec).into())?;
        trace.push(rec);
    }
    sink.emit(&Metric::DiffusionBins { rmse: bin_means(&trace) })?;
    save(
        &args.out,
        &DiffusionCheckpoint {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            vae_fingerprint: fingerprint,
            config: tr.diff.cfg.clone(),
            train: tr.tcfg.clone(),
            seed,
            step: tr.step,
            scales: tr.diff.space.scales.clone(),
            params: tr.diff.store.clone(),
            adam: tr.adam.clone(),
            rng: RngState::capture(&tr.rng),
        },
    )?;
    Ok(tr.step)
}
