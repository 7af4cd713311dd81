//! Standalone coefficient-to-structure recovery.

use std::path::Path;

use rayon::prelude::*;
use recipcrystal_core::{recover, FourierRepr, LatticeMatrix, RecoveryConfig, RecoveryResult};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formats::{read_jsonl, write_jsonl, FourierRecord, SpeciesEntry, XtlJsonRecord, SCHEMA_VERSION};

/// Per-structure roll-up of per-species results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    /// Highest stage used, `None` if any species failed.
    pub stage: Option<u8>,
    pub newton_iters: u32,
    pub residual: f64,
}

pub fn summarize(results: &[RecoveryResult]) -> Summary {
    let mut stage = Some(1);
    for r in results {
        stage = match (stage, r.stage.number()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
    }
    Summary {
        stage,
        newton_iters: results.iter().map(|r| r.newton_iters).sum(),
        residual: results.iter().map(|r| r.residual).fold(0.0, f64::max),
    }
}

/// Builds a record from occupied slots, species sorted by atomic number and
/// coordinates sorted lexicographically. Empty slots are dropped.
pub fn assemble(fr: &FourierRepr, results: &[RecoveryResult], lattice: [f64; 9], gpd: u32) -> XtlJsonRecord {
    let mut species: Vec<SpeciesEntry> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.coords.is_empty())
        .map(|(slot, r)| {
            let mut coords = r.coords.clone();
            coords.sort_unstable();
            SpeciesEntry { z: fr.slot_species[slot].unwrap_or(0), coords }
        })
        .collect();
    species.sort_by_key(|s| s.z);
    XtlJsonRecord { schema_version: SCHEMA_VERSION, lattice, grid_denominator: gpd, species }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredRecord {
    pub schema_version: u32,
    pub id: u64,
    pub success: bool,
    /// Stage per slot; `None` for a failed slot.
    pub stages: Vec<Option<u8>>,
    pub newton_iters: u32,
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<XtlJsonRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

pub fn recover_record(rec: &FourierRecord, seed: u64) -> RecoveredRecord {
    let fail = |reason: String| RecoveredRecord {
        schema_version: SCHEMA_VERSION,
        id: rec.id,
        success: false,
        stages: Vec::new(),
        newton_iters: 0,
        residual: None,
        structure: None,
        reason: Some(reason),
    };
    let fr = match rec.fourier.to_repr(None) {
        Ok(fr) => fr,
        Err(e) => return fail(e),
    };
    if !fr.coeffs.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return fail("non-finite coefficients".into());
    }
    let cfg = RecoveryConfig { seed, ..RecoveryConfig::new(rec.grid_denominator) };
    let results = match recover(&fr, &cfg) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let s = summarize(&results);
    let lattice = rec.lattice.unwrap_or_else(|| LatticeMatrix::identity().to_row_major());
    RecoveredRecord {
        schema_version: SCHEMA_VERSION,
        id: rec.id,
        success: s.stage.is_some(),
        stages: results.iter().map(|r| r.stage.number()).collect(),
        newton_iters: s.newton_iters,
        residual: Some(s.residual),
        structure: s.stage.map(|_| assemble(&fr, &results, lattice, rec.grid_denominator)),
        reason: s.stage.is_none().then(|| "recovery failed".to_string()),
    }
}

pub fn cmd_recover(input: &Path, out: &Path, seed: u64) -> Result<Vec<RecoveredRecord>> {
    let records = read_jsonl::<FourierRecord>(input)?;
    let results: Vec<RecoveredRecord> = records.par_iter().map(|(_, r)| recover_record(r, seed)).collect();
    write_jsonl(out, &results)?;
    Ok(results)
}
