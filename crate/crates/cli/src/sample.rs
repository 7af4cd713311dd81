//! Unconditional generation: diffuse a latent, decode it, recover a structure.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use recipcrystal_core::{
    log_to_lattice, recover, Acceptance, FourierRepr, LatticeLog, RecoveryConfig, MAX_ATOMIC_NUMBER, NUM_SLOTS,
};
use recipcrystal_model::diffusion::{generate, Diffuser};
use recipcrystal_model::vae::Vae;
use recipcrystal_model::{ComplexTensor, C64};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load, DiffusionCheckpoint, VaeCheckpoint};
use crate::error::{CliError, Result};
use crate::formats::{write_json, write_jsonl, XtlJsonRecord, SCHEMA_VERSION};
use crate::recover::{assemble, summarize};
use crate::screen::StageCounts;

/// Acceptance for decoded coefficients: residual at most this fraction of the atom count.
pub const SAMPLE_ACCEPTANCE: f64 = 0.5;

/// Species-head class meaning "no species in this slot".
pub const EMPTY_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// No slot decodes to at least one atom.
    Empty,
    /// Two occupied slots decode to the same element.
    DuplicateSpecies,
    /// A slot decodes to more atoms than there are coefficients to pin them down.
    TooManyAtoms,
    InvalidLattice,
    Unrecoverable,
}

/// Decoded structure before recovery plus the recovery verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Rounded zero-frequency count per occupied slot.
    pub counts: Vec<usize>,
    pub result: std::result::Result<(XtlJsonRecord, u8), Rejection>,
}

impl SampleOutcome {
    pub fn total_atoms(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub schema_version: u32,
    pub requested: usize,
    pub recovered: usize,
    pub rejected: usize,
    pub rejections: BTreeMap<Rejection, usize>,
    /// Decoded atoms per cell over every sample, including rejected ones.
    pub atom_count_histogram: BTreeMap<usize, usize>,
    /// Decoded atoms per occupied slot.
    pub species_count_histogram: BTreeMap<usize, usize>,
    /// Highest recovery stage per recovered structure; `unrecoverable`
    /// counts samples that reached recovery and failed it.
    pub stages: StageCounts,
}

impl SampleStats {
    pub fn from_outcomes(outcomes: &[SampleOutcome]) -> Self {
        let mut s = SampleStats { schema_version: SCHEMA_VERSION, requested: outcomes.len(), ..Default::default() };
        for o in outcomes {
            *s.atom_count_histogram.entry(o.total_atoms()).or_default() += 1;
            for &c in &o.counts {
                *s.species_count_histogram.entry(c).or_default() += 1;
            }
            match &o.result {
                Ok((_, stage)) => {
                    s.recovered += 1;
                    s.stages.add(Some(*stage));
                }
                Err(r) => {
                    s.rejected += 1;
                    *s.rejections.entry(*r).or_default() += 1;
                    if *r == Rejection::Unrecoverable {
                        s.stages.add(None);
                    }
                }
            }
        }
        s
    }
}

/// Turns decoder heads into a structure. A slot is occupied when its
/// highest-scoring class is an element rather than the empty class and its
/// zero-frequency coefficient rounds to at least one atom.
pub fn decode_structure(vae: &Vae, latent: &ComplexTensor, gpd: u32, seed: u64) -> SampleOutcome {
    let heads = vae.decode_value(latent);
    let ws = vae.wave_set();
    let zero = ws.zero_index();
    let mut slots = Vec::new();
    for s in 0..NUM_SLOTS {
        let class = (0..=MAX_ATOMIC_NUMBER as usize)
            .max_by(|&a, &b| {
                let (la, lb) = (heads.species_logits.get(s, a).re, heads.species_logits.get(s, b).re);
                la.total_cmp(&lb).then(b.cmp(&a))
            })
            .expect("classes");
        let f0 = heads.fourier_pred.get(zero, s).re.round();
        if class != EMPTY_CLASS && f0.is_finite() && f0 >= 1.0 {
            slots.push((s, class as u8, f0 as usize));
        }
    }
    let counts: Vec<usize> = slots.iter().map(|&(_, _, n)| n).collect();
    let reject = |r| SampleOutcome { counts: counts.clone(), result: Err(r) };
    if slots.is_empty() {
        return reject(Rejection::Empty);
    }
    let mut zs: Vec<u8> = slots.iter().map(|&(_, z, _)| z).collect();
    zs.sort_unstable();
    if zs.windows(2).any(|w| w[0] == w[1]) {
        return reject(Rejection::DuplicateSpecies);
    }
    if counts.iter().any(|&n| n > ws.len()) {
        return reject(Rejection::TooManyAtoms);
    }
    let lattice = log_to_lattice(&LatticeLog::from_coeffs(&heads.lattice_coeffs));
    let det = lattice.det();
    if !(det.is_finite() && det > 0.0) || !lattice.to_row_major().iter().all(|v| v.is_finite()) {
        return reject(Rejection::InvalidLattice);
    }
    let mut fr = FourierRepr::zeros(ws.clone());
    for &(s, z, n) in &slots {
        for r in 0..ws.len() {
            fr.set(r, s, heads.fourier_pred.get(r, s));
        }
        fr.set(zero, s, C64::new(n as f64, 0.0));
        fr.slot_species[s] = Some(z);
    }
    if !fr.coeffs.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return reject(Rejection::Unrecoverable);
    }
    let cfg = RecoveryConfig {
        acceptance: Acceptance::RelativeToCount(SAMPLE_ACCEPTANCE),
        seed,
        ..RecoveryConfig::new(gpd)
    };
    let results = match recover(&fr, &cfg) {
        Ok(r) => r,
        Err(_) => return reject(Rejection::Unrecoverable),
    };
    match summarize(&results).stage {
        Some(stage) => SampleOutcome {
            counts,
            result: Ok((assemble(&fr, &results, lattice.to_row_major(), gpd), stage)),
        },
        None => reject(Rejection::Unrecoverable),
    }
}

/// Sample `i` uses stream `i` of the seed, so output does not depend on thread count.
pub fn sample_outcomes(vae: &Vae, diff: &Diffuser, n: usize, steps: usize, seed: u64, gpd: u32) -> Result<Vec<SampleOutcome>> {
    if steps == 0 {
        return Err(CliError::Usage("sampling needs at least one step".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let latent = generate(diff, &diff.space, steps, &mut rng)?;
            Ok(decode_structure(vae, &latent, gpd, seed.wrapping_add(i as u64)))
        })
        .collect()
}

/// Loads both checkpoints and checks that the diffuser belongs to the autoencoder.
pub fn load_pipeline(vae_path: &Path, diff_path: &Path) -> Result<(Vae, Diffuser)> {
    let vck: VaeCheckpoint = load(vae_path)?;
    let dck: DiffusionCheckpoint = load(diff_path)?;
    if dck.vae_fingerprint != crate::train::vae_fingerprint(&vck) {
        return Err(CliError::CheckpointMismatch(
            "diffusion checkpoint was trained on a different autoencoder".into(),
        ));
    }
    let vae = vck.vae()?;
    let diff = dck.diffuser(&vae)?;
    Ok((vae, diff))
}

pub struct SampleArgs<'a> {
    pub vae: &'a Path,
    pub diffusion: &'a Path,
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    pub denominator: u32,
    pub out: &'a Path,
    /// Defaults to the output path with a `.stats.json` extension.
    pub stats: Option<&'a Path>,
}

pub fn cmd_sample(a: &SampleArgs) -> Result<SampleStats> {
    if a.denominator == 0 || !a.denominator.is_multiple_of(12) {
        return Err(CliError::InvalidDenominator(a.denominator));
    }
    let (vae, diff) = load_pipeline(a.vae, a.diffusion)?;
    let outcomes = sample_outcomes(&vae, &diff, a.n, a.steps, a.seed, a.denominator)?;
    let records: Vec<&XtlJsonRecord> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().map(|(r, _)| r)).collect();
    write_jsonl(a.out, records)?;
    let stats = SampleStats::from_outcomes(&outcomes);
    let stats_path = a.stats.map(Path::to_path_buf).unwrap_or_else(|| a.out.with_extension("stats.json"));
    write_json(&stats_path, &stats)?;
    Ok(stats)
}
